"""Per-channel Wald screening of PMU features against training statistics.

A channel is flagged when its standardized deviation from the training mean
exceeds the two-sided normal quantile for false-positive rate ``alpha``;
flagged channels are replaced by the training mean.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .numerics import ShapeError, q_inverse

MIN_SNAPSHOTS = 30


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelStats:
    pmu_buses: tuple
    mean: np.ndarray    # (P, 2)
    std: np.ndarray     # (P, 2)

    def to_dict(self):
        return {"pmu_buses": [int(b) for b in self.pmu_buses], "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["pmu_buses"]), np.asarray(d["mean"], float), np.asarray(d["std"], float))


@dataclass
class BddcReport:
    threshold: float
    alpha: float
    flags: np.ndarray         # bool, same shape as the screened input
    corrections: dict         # flat channel index -> (original, replacement)

    @property
    def n_flagged(self):
        return int(self.flags.sum())

    def to_json(self):
        return json.dumps({"threshold": self.threshold, "alpha": self.alpha, "flags": self.flags.tolist(),
                           "corrections": {str(k): list(v) for k, v in self.corrections.items()}})


def fit_stats(measured, pmu_buses=()):
    """Sample mean and standard deviation of each PMU channel; ``measured`` is (n, P, 2)."""
    z = np.asarray(measured, dtype=float)
    if z.ndim != 3 or z.shape[-1] != 2:
        raise ShapeError(f"measurements must be (snapshots, PMUs, 2), got {z.shape}")
    if z.shape[0] < MIN_SNAPSHOTS:
        raise StatsError(f"need at least {MIN_SNAPSHOTS} snapshots, got {z.shape[0]}")
    mean = z.mean(axis=0)
    std = z.std(axis=0, ddof=1)
    bad = np.argwhere(~(std > 0))
    if bad.size:
        p, ch = bad[0]
        raise StatsError(f"channel {('magnitude', 'angle')[ch]} of PMU {p} has zero variance")
    return ChannelStats(tuple(pmu_buses), mean, std)


def threshold(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in the open interval (0, 1), got {alpha}")
    return q_inverse(alpha / 2.0)


def screen(z, stats, alpha=0.01):
    """Return ``(corrected, report)``; ``z`` is (P, 2) or a batch (n, P, 2)."""
    tau = threshold(alpha)
    z = np.asarray(z, dtype=float)
    if z.shape[-2:] != stats.mean.shape:
        raise ShapeError(f"measurements {z.shape} do not match statistics for {stats.mean.shape[0]} PMUs")
    score = np.abs(z - stats.mean) / stats.std
    flags = score > tau
    corrected = np.where(flags, np.broadcast_to(stats.mean, z.shape), z)
    corrections = {int(k): (float(z.flat[k]), float(corrected.flat[k])) for k in np.flatnonzero(flags)}
    return corrected, BddcReport(float(tau), float(alpha), flags, corrections)
