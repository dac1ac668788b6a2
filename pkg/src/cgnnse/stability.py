"""Topology-perturbation bound for a trained model and its empirical check.

The bound is ``sqrt(2) * lam * delta * eps * L * B**(L-1) * F**(L-2)``.  It is
evaluated on the network map between standardized features and standardized
outputs, which is the function the weights act on.

Mapping of the concrete layer stack onto the constants:

* ``L`` counts weight-bearing layers: the mixture layer, any plain GCN
  layers, the attention (or substitute GCN) layer and the linear head.
* ``F`` is the widest hidden output (heads times width after concatenation).
* ``delta`` is the largest absolute entry over all weight matrices.  Attention
  vectors, the head bias and mixture parameters are not propagation weights.
* ``B`` is ``max_l max|w^(l)| * ||P_l'||_2`` where ``P_l'`` is the perturbed
  propagation operator of layer ``l``.  Graph layers take the largest of the
  binary adjacency, the normalized adjacency and (for attention layers) each
  head's attention matrix; the head propagates with the identity.
* ``eps`` is the spectral distance between the binary adjacency matrices.
* ``lam`` sums the 2-norms of the two first-layer feature columns.  Rows of
  buses without a PMU use the mixture mean, weighted over components.  The
  larger of the unperturbed and perturbed values is used.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import powerflow
from .datagen import loaded_grid
from .gnn import LinearHead, MhGatLayer
from .grid import IslandingError, adjacency_distance, build_adjacency, perturb_topology, spectral_norm

log = logging.getLogger(__name__)

CSV_FIELDS = ("outage", "snapshot", "lam", "delta", "eps", "B", "L", "F", "bound", "measured", "holds")


@dataclass
class StabilityCertificate:
    lam: float
    delta: float
    eps: float
    B: float
    L: int
    F: int
    bound: float
    measured: float
    measured_raw: float = 0.0     # same distance in p.u. / radians, for reference
    outage: str = ""
    snapshot: int = 0

    @property
    def holds(self):
        return self.measured <= self.bound

    def row(self):
        d = asdict(self)
        d["holds"] = self.holds
        return d


def first_layer_features(model, x, mask=None):
    """Standardized first-layer input with mixture-mean rows at unobserved buses."""
    mask = model.mask if mask is None else np.asarray(mask, bool)
    layer = model.layers[0]
    weights, means, _ = layer.decoded()                      # (N, C), (C, N, f)
    fill = np.einsum("nc,cnf->nf", weights, means)
    z = model.standardize(x)
    return np.where(mask[:, None], z, fill)


def structural_constants(model):
    """(delta, L, F) for a model; these do not depend on the topology."""
    delta = max(float(np.max(np.abs(l.params["weight"]))) for l in model.layers)
    widths = [l.out_features for l in model.layers if not isinstance(l, LinearHead)]
    return delta, len(model.layers), max(widths)


def layer_b(model, adj2, x2, mask=None):
    """Largest |w| * ||P'||_2 over layers; also returns the per-layer values."""
    a_norms = [spectral_norm(adj2.a), spectral_norm(adj2.a_tilde)]
    att = model.attention(x2, mask, adj2)
    per_layer = []
    for layer in model.layers:
        wmax = float(np.max(np.abs(layer.params["weight"])))
        if isinstance(layer, LinearHead):
            op = 1.0
        elif isinstance(layer, MhGatLayer) and att is not None:
            heads = [spectral_norm(att[0, k]) for k in range(att.shape[1])]
            op = max(a_norms + heads)
        else:
            op = max(a_norms)
        per_layer.append(wmax * op)
    return max(per_layer), per_layer


def bound_value(lam, delta, eps, b, n_layers, width):
    return math.sqrt(2.0) * lam * delta * eps * n_layers * b ** (n_layers - 1) * float(width) ** (n_layers - 2)


def certificate(model, adj, adj2, x, x2, mask=None):
    """Bound and measured output distance for one snapshot ``x`` (N, 2) under adj -> adj2."""
    x, x2 = np.asarray(x, float), np.asarray(x2, float)
    if adj.n != adj2.n or adj.n != model.adj.n:
        raise ValueError(f"adjacency sizes {adj.n}, {adj2.n} do not match the model ({model.adj.n})")
    if x.shape != x2.shape or x.shape[0] != adj.n:
        raise ValueError(f"feature shapes {x.shape} and {x2.shape} do not match {adj.n} buses")
    delta, n_layers, width = structural_constants(model)
    eps = adjacency_distance(adj, adj2)
    b, _ = layer_b(model, adj2, x2, mask)
    lam = max(float(np.linalg.norm(first_layer_features(model, xx, mask), axis=0).sum()) for xx in (x, x2))
    out = model.predict(x, mask, adj)
    out2 = model.predict(x2, mask, adj2)
    raw = float(np.linalg.norm(out - out2))
    measured = float(np.linalg.norm((out - out2) / model.scale))
    return StabilityCertificate(lam, delta, eps, b, n_layers, width,
                                bound_value(lam, delta, eps, b, n_layers, width), measured, raw)


def perturbed_features(grid2, dataset, index):
    """Features after re-solving power flow on ``grid2`` at snapshot ``index``'s loads.

    The measurement errors of the original snapshot are reused, so only the
    physics changes.
    """
    g = loaded_grid(grid2, dataset.load_buses, dataset.loads[index])
    sol = powerflow.solve(g)
    m = dataset.mask
    vm_true, va_true = dataset.vm[index, m], dataset.va[index, m]
    meas = dataset.measured[index]
    x2 = np.zeros((dataset.n_bus, 2))
    x2[m, 0] = sol.vm[m] * (meas[:, 0] / vm_true)
    x2[m, 1] = sol.va[m] + (meas[:, 1] - va_true)
    return x2


def outage_sets(grid, k, cap=50, seed=0):
    """Non-islanding outage index sets: exhaustive for k=1, seeded random sample for k>=2."""
    if k < 1:
        raise ValueError("outage depth must be at least 1")
    live = [i for i, br in enumerate(grid.branches) if br.in_service]

    def ok(combo):
        try:
            perturb_topology(grid, list(combo))
            return True
        except IslandingError:
            return False

    if k == 1:
        return [(i,) for i in live if ok((i,))]
    rng = np.random.default_rng([seed, k])
    total = math.comb(len(live), k)
    if total <= 4 * cap:
        pool = list(itertools.combinations(live, k))
        rng.shuffle(pool)
    else:
        pool = (tuple(sorted(rng.choice(live, size=k, replace=False))) for _ in range(40 * cap))
    chosen, seen = [], set()
    for combo in pool:
        combo = tuple(int(c) for c in combo)
        if combo in seen:
            continue
        seen.add(combo)
        if ok(combo):
            chosen.append(combo)
            if len(chosen) >= cap:
                break
    return chosen


def outage_label(grid, combo):
    return "+".join(f"{grid.branches[i].f}-{grid.branches[i].t}" for i in combo)


def sweep_contingencies(model, grid, dataset, k=1, snapshots=(0,), cap=50, seed=0, sets=None):
    """Certificates for every outage set; each row keeps the snapshot closest to violating.

    Outage sets whose power flow does not converge are skipped and logged.
    """
    adj = build_adjacency(grid)
    x_all = dataset.features()
    rows = []
    for combo in (outage_sets(grid, k, cap, seed) if sets is None else sets):
        g2 = perturb_topology(grid, list(combo))
        adj2 = build_adjacency(g2)
        worst = None
        for i in snapshots:
            try:
                x2 = perturbed_features(g2, dataset, i)
            except powerflow.PowerFlowError as exc:
                log.warning("outage %s snapshot %d skipped: %s", outage_label(grid, combo), i, exc)
                continue
            cert = certificate(model, adj, adj2, x_all[i], x2)
            cert.outage, cert.snapshot = outage_label(grid, combo), int(i)
            ratio = cert.measured / cert.bound if cert.bound > 0 else (math.inf if cert.measured > 0 else 0.0)
            if worst is None or ratio > worst[0]:
                worst = (ratio, cert)
        if worst is not None:
            rows.append(worst[1])
    return rows


def write_certificates(rows, csv_path=None, json_path=None):
    if csv_path:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow(r.row())
    if json_path:
        with open(json_path, "w") as fh:
            json.dump({"certificates": [r.row() for r in rows],
                       "violations": sum(not r.holds for r in rows)}, fh, indent=2)
