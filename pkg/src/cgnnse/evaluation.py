"""Accuracy metrics and desk-scale study drivers.

Each study returns a plain dict with a ``rows`` list (one row per bar or
point of the corresponding table or figure) plus context fields.
``write_report`` turns a set of studies into ``report.json``, one CSV per
study and one SVG plot per study.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import bddc, powerflow
from .datagen import NoiseModel, SnapshotDataset, apply_noise, loaded_grid
from .gnn import Architecture
from .grid import IslandingError, build_adjacency, perturb_topology
from .train import TrainConfig, fit, init_model, split_indices

log = logging.getLogger(__name__)

STUDY_KINDS = ("baseline", "topology", "pmu_failure", "combined", "noise", "bad_data",
               "attention_ablation", "head_sweep", "pmu_set_sweep")


@dataclass
class MetricSet:
    mape: float             # magnitude, percent
    mae_deg: float          # angle, degrees
    sigma2: float           # complex squared error summed over buses, mean over snapshots
    time_ms: float = 0.0    # per-snapshot inference time

    def to_dict(self):
        return asdict(self)


def metrics(pred, truth, time_ms=0.0):
    """Metrics for (..., N, 2) arrays of (magnitude p.u., angle rad)."""
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    vm = truth[..., 0]
    if np.any(vm == 0):
        raise ValueError("true voltage magnitude of zero makes MAPE undefined")
    mape = float(np.mean(np.abs(pred[..., 0] - vm) / np.abs(vm)) * 100.0)
    mae = float(np.degrees(np.mean(np.abs(pred[..., 1] - truth[..., 1]))))
    y_hat = pred[..., 0] * np.exp(1j * pred[..., 1])
    y = vm * np.exp(1j * truth[..., 1])
    err = np.abs(y_hat - y) ** 2
    sigma2 = float(np.mean(err.reshape(-1, truth.shape[-2]).sum(axis=1)))
    return MetricSet(mape, mae, sigma2, float(time_ms))


def climatology(train_targets):
    """Per-bus training mean, the no-measurement reference predictor."""
    return np.asarray(train_targets, float).mean(axis=0)


def timed_predict(model, x, mask=None, adj=None):
    """Predictions plus median per-snapshot wall time (ms) over single-snapshot calls."""
    x = np.asarray(x, float)
    times = []
    out = np.empty(x.shape[:-1] + (2,))
    for i in range(len(x)):
        t0 = time.perf_counter()
        out[i] = model.predict(x[i], mask, adj)
        times.append(time.perf_counter() - t0)
    return out, 1e3 * float(np.median(times))


# ---------------------------------------------------------------------------
# study setup
# ---------------------------------------------------------------------------

@dataclass
class StudySetup:
    """Everything a study needs: the grid, train/test splits and how to train."""

    grid: object
    train: SnapshotDataset
    test: SnapshotDataset
    arch: Architecture = field(default_factory=Architecture)
    train_config: TrainConfig = field(default_factory=TrainConfig)
    model: object = None
    seed: int = 0
    max_snapshots: int = 200
    _cache: dict = field(default_factory=dict, repr=False)

    def trained(self, arch=None, train=None, key=None):
        """The base model, or a fresh model trained for a variant (cached by ``key``)."""
        if arch is None and train is None:
            if self.model is None:
                self.model = self._train(self.arch, self.train)
            return self.model
        if key not in self._cache:
            self._cache[key] = self._train(arch or self.arch, train or self.train)
        return self._cache[key]

    def _train(self, arch, data):
        tr, _ = split_indices(len(data), self.train_config.validation_fraction, self.train_config.seed)
        model = init_model(data, self.grid, arch, self.seed, train_idx=tr)
        model, report = fit(model, data, self.train_config)
        model.meta["train_report"] = {"best_epoch": report.best_epoch, "stopped_epoch": report.stopped_epoch,
                                      "best_val_loss": report.summary["best_val_loss"]}
        return model

    def test_slice(self):
        n = min(len(self.test), self.max_snapshots)
        return self.test.subset(np.arange(n))


def renoise(ds, noise, seed):
    """Same true states, fresh measurements drawn from ``noise``."""
    vm, va = apply_noise(ds.vm[:, ds.mask], ds.va[:, ds.mask], noise, [seed, 1])
    return replace(ds, measured=np.stack([vm, va], axis=-1), noise=noise.to_dict(), seed=int(seed))


def with_pmus(grid, ds, pmu_buses, noise, seed):
    """Same true states observed through a different PMU set."""
    mask = np.zeros(ds.n_bus, dtype=bool)
    for b in pmu_buses:
        mask[grid.index[b]] = True
    vm, va = apply_noise(ds.vm[:, mask], ds.va[:, mask], noise, [seed, 1])
    ordered = sorted(pmu_buses, key=lambda b: grid.index[b])
    return replace(ds, mask=mask, pmu_buses=ordered, measured=np.stack([vm, va], axis=-1))


def resolve_under_outage(grid2, ds):
    """True states of ``ds``'s load draws re-solved on ``grid2``, with the original
    measurement errors carried over to the new PMU readings."""
    vm = np.empty_like(ds.vm)
    va = np.empty_like(ds.va)
    for i in range(len(ds)):
        sol = powerflow.solve(loaded_grid(grid2, ds.load_buses, ds.loads[i]))
        vm[i], va[i] = sol.vm, sol.va
    m = ds.mask
    ratio = ds.measured[..., 0] / ds.vm[:, m]
    offset = ds.measured[..., 1] - ds.va[:, m]
    measured = np.stack([vm[:, m] * ratio, va[:, m] + offset], axis=-1)
    return replace(ds, vm=vm, va=va, measured=measured)


def top_flow_outages(grid, count):
    """Branch indices by descending base-case |S| at the from-end, skipping islanding ones."""
    if count <= 0:
        return []
    sol = powerflow.solve(grid)
    flow = np.abs(powerflow.branch_flows(grid, sol.vm, sol.va))
    chosen = []
    for k in np.argsort(-flow, kind="stable"):
        if not grid.branches[k].in_service:
            continue
        try:
            perturb_topology(grid, [int(k)])
        except IslandingError:
            continue
        chosen.append(int(k))
        if len(chosen) == count:
            break
    return chosen


def _label(grid, k):
    br = grid.branches[k]
    return f"{br.f}-{br.t}"


def _row(name, m, **extra):
    d = {"case": name}
    d.update(m.to_dict())
    d.update(extra)
    return d


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def study_baseline(setup, cfg):
    model = setup.trained()
    test = setup.test_slice()
    pred, ms = timed_predict(model, test.features())
    clim = climatology(setup.train.targets())
    base = metrics(pred, test.targets(), ms)
    ref = metrics(np.broadcast_to(clim, test.targets().shape), test.targets())
    return {"rows": [_row("cgnn", base), _row("climatology", ref)],
            "parameters": model.parameter_count(), "pmu_buses": list(setup.train.pmu_buses)}


def study_topology(setup, cfg):
    model = setup.trained()
    test = setup.test_slice()
    pred = model.predict(test.features())
    base = metrics(pred, test.targets())
    rows = [_row("Base", base, ratio=1.0)]
    for k in top_flow_outages(setup.grid, int(cfg.get("outages", 5))):
        g2 = perturb_topology(setup.grid, [k])
        ds2 = resolve_under_outage(g2, test)
        m = metrics(model.predict(ds2.features(), adj=build_adjacency(g2)), ds2.targets())
        rows.append(_row(_label(setup.grid, k), m, ratio=m.mape / base.mape if base.mape else math.inf))
    return {"rows": rows, "selection": "descending base-case |S| at the from-end, non-islanding"}


def failure_subsets(pmus, r, cap, seed):
    """All r-subsets of ``pmus`` when there are at most ``cap``, else a seeded sample of ``cap``."""
    total = math.comb(len(pmus), r)
    if total <= cap:
        return [list(c) for c in itertools.combinations(pmus, r)]
    rng = np.random.default_rng([seed, r])
    seen = set()
    while len(seen) < cap:
        seen.add(tuple(sorted(rng.choice(pmus, size=r, replace=False).tolist())))
    return [list(c) for c in sorted(seen)]


def study_pmu_failure(setup, cfg):
    model = setup.trained()
    test = setup.test_slice()
    pmus = list(setup.train.pmu_buses)
    x, y = test.features(), test.targets()
    rows = []
    for r in cfg.get("failures", range(len(pmus))):
        subsets = failure_subsets(pmus, int(r), int(cfg.get("cap", 50)), setup.seed)
        per = []
        for failed in subsets:
            mask = test.mask.copy()
            for b in failed:
                mask[setup.grid.index[b]] = False
            per.append(metrics(model.predict(x, mask), y))
        rows.append({"case": f"{r} failed", "failures": int(r), "subsets": len(subsets),
                     "mape": float(np.mean([m.mape for m in per])),
                     "mae_deg": float(np.mean([m.mae_deg for m in per])),
                     "sigma2": float(np.mean([m.sigma2 for m in per])),
                     "worst_mape": float(max(m.mape for m in per))})
    return {"rows": rows}


def study_combined(setup, cfg):
    """Each top-flow outage paired with each single PMU failure."""
    model = setup.trained()
    test = setup.test_slice()
    rows = [_row("Base", metrics(model.predict(test.features()), test.targets()))]
    for k in top_flow_outages(setup.grid, int(cfg.get("outages", 2))):
        g2 = perturb_topology(setup.grid, [k])
        ds2 = resolve_under_outage(g2, test)
        adj2 = build_adjacency(g2)
        for b in setup.train.pmu_buses:
            mask = test.mask.copy()
            mask[setup.grid.index[b]] = False
            m = metrics(model.predict(ds2.features(), mask, adj2), ds2.targets())
            rows.append(_row(f"({_label(setup.grid, k)}) PMU {b}", m))
    return {"rows": rows}


def study_noise(setup, cfg):
    """Train and test under each noise model on the same true states."""
    rows = []
    for spec in cfg.get("noises", ["gaussian:0.01", "gmm"]):
        noise = NoiseModel.from_spec(spec)
        tr = renoise(setup.train, noise, setup.seed + 101)
        te = renoise(setup.test_slice(), noise, setup.seed + 202)
        model = setup.trained(train=tr, key=("noise", spec))
        rows.append(_row(spec, metrics(model.predict(te.features()), te.targets())))
    return {"rows": rows}


def inject_outliers(measured, stats, fraction, rng, low=5.0, high=20.0):
    """Corrupt ``fraction`` of all channels by uniform +/-(low..high) sigma offsets."""
    z = np.array(measured, dtype=float)
    flat = z.reshape(-1)
    n_bad = int(round(fraction * flat.size))
    idx = rng.choice(flat.size, size=n_bad, replace=False)
    std = np.broadcast_to(stats.std, z.shape).reshape(-1)
    sign = rng.choice([-1.0, 1.0], size=n_bad)
    flat[idx] += sign * rng.uniform(low, high, size=n_bad) * std[idx]
    return z, idx


def study_bad_data(setup, cfg):
    model = setup.trained()
    test = setup.test_slice()
    alpha = float(cfg.get("alpha", 0.01))
    stats = bddc.fit_stats(setup.train.measured, setup.train.pmu_buses)
    y = test.targets()
    rows = []
    for frac in cfg.get("fractions", [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]):
        raw, screened, flagged = [], [], []
        for s in range(int(cfg.get("seeds", 3))):
            rng = np.random.default_rng([setup.seed, s, int(round(frac * 1000))])
            bad, _ = inject_outliers(test.measured, stats, frac, rng)
            fixed, rep = bddc.screen(bad, stats, alpha)
            x_bad = test.features()
            x_bad[:, test.mask] = bad
            x_fix = test.features()
            x_fix[:, test.mask] = fixed
            raw.append(metrics(model.predict(x_bad), y))
            screened.append(metrics(model.predict(x_fix), y))
            flagged.append(rep.n_flagged / bad.size)
        rows.append({"case": f"{int(round(frac * 100))}%", "fraction": float(frac),
                     "mape_unscreened": float(np.mean([m.mape for m in raw])),
                     "mae_unscreened": float(np.mean([m.mae_deg for m in raw])),
                     "mape_screened": float(np.mean([m.mape for m in screened])),
                     "mae_screened": float(np.mean([m.mae_deg for m in screened])),
                     "flag_rate": float(np.mean(flagged))})
    return {"rows": rows, "alpha": alpha, "outlier_sigma": [5.0, 20.0]}


def _val_metrics(setup, model):
    _, va = split_indices(len(setup.train), setup.train_config.validation_fraction, setup.train_config.seed)
    val = setup.train.subset(va)
    return metrics(model.predict(val.features()), val.targets())


def study_attention_ablation(setup, cfg):
    variants = [("MH-GAT", setup.arch), ("GCN substitute", replace(setup.arch, attention=False))]
    rows = []
    for name, arch in variants:
        model = setup.trained() if arch == setup.arch else setup.trained(arch=arch, key=("arch", repr(arch)))
        test = setup.test_slice()
        tm = metrics(model.predict(test.features()), test.targets())
        vm = _val_metrics(setup, model)
        rows.append(_row(name, tm, val_mape=vm.mape, val_mae_deg=vm.mae_deg, parameters=model.parameter_count()))
    return {"rows": rows, "note": "substitute GCN has output width hidden*heads, matching the attention layer"}


def study_head_sweep(setup, cfg):
    rows = []
    for k in cfg.get("heads", [1, 2, 4]):
        arch = replace(setup.arch, heads=int(k))
        model = setup.trained() if arch == setup.arch else setup.trained(arch=arch, key=("arch", repr(arch)))
        test = setup.test_slice()
        tm = metrics(model.predict(test.features()), test.targets())
        vm = _val_metrics(setup, model)
        rows.append(_row(f"K={k}", tm, heads=int(k), val_mape=vm.mape, val_mae_deg=vm.mae_deg,
                         parameters=model.parameter_count()))
    return {"rows": rows}


def study_pmu_set_sweep(setup, cfg):
    noise = NoiseModel(**{k: v for k, v in setup.train.noise.items()})
    rows = []
    for pmus in cfg.get("pmu_sets", [list(setup.train.pmu_buses)]):
        pmus = [int(b) for b in pmus]
        tr = with_pmus(setup.grid, setup.train, pmus, noise, setup.seed + 303)
        te = with_pmus(setup.grid, setup.test_slice(), pmus, noise, setup.seed + 404)
        model = setup.trained(train=tr, key=("pmus", tuple(pmus)))
        clim = climatology(tr.targets())
        m = metrics(model.predict(te.features()), te.targets())
        c = metrics(np.broadcast_to(clim, te.targets().shape), te.targets())
        rows.append(_row(",".join(map(str, pmus)), m, n_pmu=len(pmus), clim_mape=c.mape, clim_mae_deg=c.mae_deg))
    return {"rows": rows}


_STUDIES = {
    "baseline": study_baseline, "topology": study_topology, "pmu_failure": study_pmu_failure,
    "combined": study_combined, "noise": study_noise, "bad_data": study_bad_data,
    "attention_ablation": study_attention_ablation, "head_sweep": study_head_sweep,
    "pmu_set_sweep": study_pmu_set_sweep,
}


def run_study(kind, setup, config=None):
    if kind not in _STUDIES:
        raise ValueError(f"unknown study kind {kind!r}; choose from {', '.join(STUDY_KINDS)}")
    if setup is None or setup.train is None or setup.test is None:
        raise ValueError("study needs a grid, training data and test data")
    t0 = time.perf_counter()
    out = _STUDIES[kind](setup, dict(config or {}))
    out["kind"] = kind
    out["seconds"] = time.perf_counter() - t0
    return out


def write_report(studies, out_dir, plots=True):
    """``report.json``, ``<kind>.csv`` and ``<kind>.svg`` for each study; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    report = {s["kind"]: s for s in studies}
    (out / "report.json").write_text(json.dumps(report, indent=2, default=float))
    paths.append(out / "report.json")
    for s in studies:
        rows = s["rows"]
        if not rows:
            continue
        fields = list(dict.fromkeys(k for r in rows for k in r))
        path = out / f"{s['kind']}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            w.writerows(rows)
        paths.append(path)
    if plots:
        from .plotting import plot_study
        for s in studies:
            paths.append(plot_study(s, out / f"{s['kind']}.svg"))
    return paths
