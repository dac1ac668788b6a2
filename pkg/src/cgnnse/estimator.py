"""Online path: screen incoming PMU phasors, then run the trained network."""
from __future__ import annotations

import time

import numpy as np

from . import bddc
from .gnn import load_model
from .grid import build_adjacency, parse_case, perturb_topology


class SchemaError(ValueError):
    pass


class StateEstimator:
    """Trained model plus the grid and screening statistics it was trained with."""

    def __init__(self, model, grid, stats=None, alpha=0.01):
        bddc.threshold(alpha)           # validates alpha
        self.model = model
        self.grid = grid
        self.stats = stats
        self.alpha = alpha
        self.pmu_buses = [b for b, m in zip(grid.bus_ids(), model.mask) if m]
        self._adj = {(): model.adj}

    @classmethod
    def from_checkpoint(cls, path, alpha=0.01):
        model = load_model(path)
        extra = model.meta
        if not extra.get("case_text"):
            raise SchemaError("checkpoint carries no grid description")
        grid = parse_case(extra["case_text"], extra.get("case_name", "case"))
        if grid.digest() != model.grid_hash:
            raise SchemaError("grid stored in the checkpoint does not match its hash")
        stats = bddc.ChannelStats.from_dict(extra["bddc"]) if extra.get("bddc") else None
        return cls(model, grid, stats, alpha)

    def adjacency(self, outages=()):
        """Adjacency after opening the given branch indices (cached)."""
        key = tuple(sorted(outages))
        if key not in self._adj:
            self._adj[key] = build_adjacency(perturb_topology(self.grid, list(key)))
        return self._adj[key]

    def branch_index(self, label):
        """Index of the first in-service branch ``"a-b"`` in either orientation."""
        try:
            f, t = (int(v) for v in label.split("-"))
        except ValueError:
            raise SchemaError(f"outage {label!r} is not of the form FROM-TO") from None
        return self.grid.find_branch(f, t)

    def parse_record(self, record):
        """(P, 2) phasors in p.u./rad and a boolean availability vector from one JSON record."""
        buses = [int(b) for b in record.get("bus", [])]
        if sorted(buses) != sorted(self.pmu_buses):
            raise SchemaError(f"record buses {buses} do not match the model's PMU buses {self.pmu_buses}")
        vm = dict(zip(buses, record["vm_pu"]))
        va = dict(zip(buses, record["va_deg"]))
        z = np.zeros((len(self.pmu_buses), 2))
        ok = np.ones(len(self.pmu_buses), dtype=bool)
        for p, b in enumerate(self.pmu_buses):
            if vm[b] is None or va[b] is None:
                ok[p] = False       # a failed PMU: its bus falls back on the mixture prior
                continue
            z[p] = (float(vm[b]), np.deg2rad(float(va[b])))
        return z, ok

    def estimate(self, z, available=None, outages=(), screen=True):
        """States (N, 2) for one snapshot of PMU phasors ``z`` (P, 2); returns (states, report, ms)."""
        t0 = time.perf_counter()
        z = np.asarray(z, dtype=float)
        report = None
        if screen and self.stats is not None:
            z, report = bddc.screen(z, self.stats, self.alpha)
        mask = self.model.mask.copy()
        if available is not None:
            mask[np.flatnonzero(self.model.mask)[~np.asarray(available, bool)]] = False
        x = np.zeros((self.grid.n_bus, 2))
        x[self.model.mask] = z
        states = self.model.predict(x, mask, self.adjacency(outages))
        return states, report, 1e3 * (time.perf_counter() - t0)
