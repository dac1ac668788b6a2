"""Offline data pipeline: load KDEs, operating-condition sampling, PMU noise, EM priors, dataset files."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics
from .container import read_container, write_container
from .grid import serialize_case
from .powerflow import PowerFlowError, power_mismatch, solve

log = logging.getLogger(__name__)

DATASET_MAGIC = b"CGNNDS01"
DATASET_VERSION = 1
MIN_HISTORY = 30
_PPF_GRID = 4096
# multiplier turning a 99.7 % TVE budget into a per-channel sigma (Rayleigh quantile)
_TVE_Q997 = math.sqrt(-2.0 * math.log(1.0 - 0.997))


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# load distributions
# ---------------------------------------------------------------------------

@dataclass
class LoadDistribution:
    """Gaussian-kernel density of one load's history, kernels truncated at 3 bandwidths."""

    points: np.ndarray
    bandwidth: float

    def __post_init__(self):
        self.points = np.sort(np.asarray(self.points, dtype=np.float64))
        if not self.bandwidth > 0:
            raise DataError(f"bandwidth must be positive, got {self.bandwidth}")
        lo = self.points[0] - 3 * self.bandwidth
        hi = self.points[-1] + 3 * self.bandwidth
        self._grid = np.linspace(lo, hi, _PPF_GRID)
        self._cdf = self._grid_cdf()

    @property
    def support(self):
        return self._grid[0], self._grid[-1]

    def cdf(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        z = (x[:, None] - self.points[None, :]) / self.bandwidth
        lo = numerics.norm_cdf(-3.0)
        mass = (numerics.norm_cdf(np.clip(z, -3.0, 3.0)) - lo) / (1.0 - 2.0 * lo)
        return mass.mean(axis=1)

    def _grid_cdf(self):
        # Linear binning onto the grid, then one convolution with the kernel CDF
        # sampled at every grid offset. Error is second order in spacing/bandwidth.
        g = self._grid
        d = g[1] - g[0]
        t = (self.points - g[0]) / d
        k = np.clip(np.floor(t).astype(np.int64), 0, g.size - 2)
        frac = t - k
        counts = np.bincount(k, 1.0 - frac, g.size) + np.bincount(k + 1, frac, g.size)
        offsets = np.arange(-(g.size - 1), g.size) * d / self.bandwidth
        lo = numerics.norm_cdf(-3.0)
        kernel = (numerics.norm_cdf(np.clip(offsets, -3.0, 3.0)) - lo) / (1.0 - 2.0 * lo)
        full = np.convolve(counts, kernel)
        cdf = full[g.size - 1:2 * g.size - 1] / self.points.size
        return np.maximum.accumulate(np.clip(cdf, 0.0, 1.0))

    def ppf(self, u):
        return np.interp(u, self._cdf, self._grid)

    def sample(self, rng, n):
        return self.ppf(rng.random(n))


def silverman_bandwidth(x):
    x = np.asarray(x, dtype=np.float64)
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(x) ** -0.2


def fit_load_kde(history, bandwidth="silverman"):
    """KDE of a load's MW history; ``bandwidth`` is ``"silverman"`` or a fixed float (MW)."""
    x = np.asarray(history, dtype=np.float64).ravel()
    if x.size < MIN_HISTORY:
        raise DataError(f"need at least {MIN_HISTORY} historical points, got {x.size}")
    h = silverman_bandwidth(x) if bandwidth == "silverman" else float(bandwidth)
    if not h > 0:
        raise DataError("history is degenerate; use a fixed bandwidth")
    return LoadDistribution(x, h)


@dataclass
class LoadModel:
    """Per-load marginals plus an optional Gaussian-copula correlation between loads."""

    bus_ids: list
    dists: list
    correlation: np.ndarray | None = None

    def __post_init__(self):
        self._factor = None if self.correlation is None else np.linalg.cholesky(self.correlation)

    def sample(self, rng):
        n = len(self.dists)
        z = rng.standard_normal(n)
        if self._factor is not None:
            z = self._factor @ z
        u = numerics.norm_cdf(z)
        return np.array([d.ppf(ui) for d, ui in zip(self.dists, u)])


def synthetic_load_history(g, n_points=2000, seed=0, swing=0.2, jitter=0.03):
    """Stand-in for SCADA history: a shared daily profile times per-load jitter.

    Returns ``{bus_id: MW series}`` for every bus with non-zero nominal load.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_points)
    level = 0.85 + swing * np.sin(2 * np.pi * t / 48.0) + 0.03 * rng.standard_normal(n_points)
    out = {}
    for b in g.buses:
        if b.pd != 0.0:
            out[b.id] = b.pd * level * (1.0 + jitter * rng.standard_normal(n_points))
    return out


def fit_load_model(history, bandwidth="silverman", correlated=True):
    bus_ids = sorted(history)
    dists = [fit_load_kde(history[b], bandwidth) for b in bus_ids]
    corr = None
    if correlated and len(bus_ids) > 1:
        # normal scores of the ranks, so the copula ignores the marginal shapes
        mat = np.column_stack([history[b] for b in bus_ids])
        ranks = mat.argsort(axis=0).argsort(axis=0)
        scores = _norm_ppf((ranks + 0.5) / mat.shape[0])
        corr = np.corrcoef(scores, rowvar=False)
        corr = corr + 1e-9 * np.eye(len(bus_ids))
    return LoadModel(bus_ids, dists, corr)


def _norm_ppf(p):
    # vectorised bisection; only used on rank scores
    lo = np.full(np.shape(p), -10.0)
    hi = np.full(np.shape(p), 10.0)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = numerics.norm_cdf(mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# operating conditions
# ---------------------------------------------------------------------------

@dataclass
class TrueStates:
    vm: np.ndarray          # (n, N) p.u.
    va: np.ndarray          # (n, N) rad
    loads: np.ndarray       # (n, n_load) MW
    load_buses: list
    iterations: np.ndarray
    mismatch: np.ndarray

    def __len__(self):
        return self.vm.shape[0]


def loaded_grid(g, load_buses, pd):
    """Grid with the given MW loads; Q follows at nominal power factor and non-slack generation tracks total load."""
    nominal_p = np.array([b.pd for b in g.buses])
    nominal_q = np.array([b.qd for b in g.buses])
    new_p = nominal_p.copy()
    for bid, p in zip(load_buses, pd):
        new_p[g.index[bid]] = p
    ratio = np.divide(new_p, nominal_p, out=np.ones_like(new_p), where=nominal_p != 0)
    total = nominal_p.sum()
    scale = new_p.sum() / total if total else 1.0
    return g.with_loads(new_p, nominal_q * ratio, gen_scale=scale)


def _one_snapshot(args):
    g, model, seed, k, tol, retries = args
    rng = np.random.default_rng([seed, k])
    for attempt in range(retries + 1):
        pd = model.sample(rng)
        try:
            sol = solve(loaded_grid(g, model.bus_ids, pd), tolerance=tol)
            return pd, sol
        except PowerFlowError as exc:
            log.warning("snapshot %d attempt %d did not solve: %s", k, attempt, exc)
    raise PowerFlowError(f"snapshot {k}: power flow failed after {retries} resamples")


def generate_snapshots(g, model, count, seed=0, tolerance=1e-8, retries=10, workers=1):
    """Sample ``count`` operating conditions and solve each one.

    Snapshot ``k`` draws from its own stream ``(seed, k)``, so results do not
    depend on ``workers``.
    """
    jobs = [(g, model, seed, k, tolerance, retries) for k in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_one_snapshot, jobs, chunksize=max(1, count // (4 * workers))))
    else:
        results = [_one_snapshot(j) for j in jobs]
    return TrueStates(
        vm=np.array([s.vm for _, s in results]),
        va=np.array([s.va for _, s in results]),
        loads=np.array([p for p, _ in results]),
        load_buses=list(model.bus_ids),
        iterations=np.array([s.iterations for _, s in results]),
        mismatch=np.array([s.mismatch for _, s in results]),
    )


def verify_states(g, states):
    """Re-substitute every snapshot into the power-balance equations; returns worst mismatch."""
    worst = 0.0
    for k in range(len(states)):
        gk = loaded_grid(g, states.load_buses, states.loads[k])
        worst = max(worst, power_mismatch(gk, states.vm[k], states.va[k]))
    return worst


# ---------------------------------------------------------------------------
# measurement noise
# ---------------------------------------------------------------------------

@dataclass
class NoiseModel:
    """PMU error model.  Magnitude errors are fractions, angle errors radians.

    ``gaussian_tve``: independent zero-mean normals with ``sigma_mag`` / ``sigma_ang``.
    ``gmm_tve``: one component drawn per phasor, shared by its magnitude and angle.
    """

    kind: str = "gaussian_tve"
    sigma_mag: float = 0.0
    sigma_ang: float = 0.0
    weights: list = field(default_factory=list)
    mean_mag: list = field(default_factory=list)
    std_mag: list = field(default_factory=list)
    mean_ang: list = field(default_factory=list)
    std_ang: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind == "gmm_tve":
            if abs(sum(self.weights) - 1.0) > 1e-12:
                raise DataError("noise mixture weights must sum to 1")
            if min(self.std_mag + self.std_ang) <= 0:
                raise DataError("noise std devs must be positive")
        elif self.kind == "gaussian_tve":
            if self.sigma_mag < 0 or self.sigma_ang < 0:
                raise DataError("noise std devs must be non-negative")
        else:
            raise DataError(f"unknown noise kind {self.kind!r}")

    @classmethod
    def gaussian(cls, tve=0.01):
        """Equal magnitude/angle split with the 99.7th percentile of TVE equal to ``tve``."""
        s = tve / _TVE_Q997
        return cls("gaussian_tve", sigma_mag=s, sigma_ang=s)

    @classmethod
    def two_component(cls):
        """Two-component non-Gaussian model (percent / degree parameters converted)."""
        return cls("gmm_tve", weights=[0.4, 0.6],
                   mean_mag=[-0.004, 0.006], std_mag=[0.0025, 0.0025],
                   mean_ang=list(np.deg2rad([-0.2, 0.3])), std_ang=list(np.deg2rad([0.12, 0.12])))

    @classmethod
    def from_spec(cls, spec):
        """Parse CLI text: ``none``, ``gaussian`` / ``gaussian:<tve>``, ``gmm``."""
        if spec in (None, "none"):
            return cls("gaussian_tve")
        if spec == "gmm":
            return cls.two_component()
        if spec.startswith("gaussian"):
            _, _, tve = spec.partition(":")
            return cls.gaussian(float(tve) if tve else 0.01)
        raise DataError(f"unknown noise spec {spec!r}")

    def errors(self, rng, shape, return_components=False):
        """Draw (magnitude fraction, angle rad) error arrays of ``shape``."""
        if self.kind == "gaussian_tve":
            em = self.sigma_mag * rng.standard_normal(shape)
            ea = self.sigma_ang * rng.standard_normal(shape)
            comp = np.zeros(shape, dtype=int)
        else:
            comp = rng.choice(len(self.weights), size=shape, p=self.weights)
            em = np.take(self.mean_mag, comp) + np.take(self.std_mag, comp) * rng.standard_normal(shape)
            ea = np.take(self.mean_ang, comp) + np.take(self.std_ang, comp) * rng.standard_normal(shape)
        return (em, ea, comp) if return_components else (em, ea)

    def to_dict(self):
        return {k: (list(map(float, v)) if isinstance(v, list) else v) for k, v in asdict(self).items()}


def apply_noise(vm, va, model, seed):
    """Measured (magnitude, angle): multiplicative magnitude error, additive angle error."""
    rng = np.random.default_rng(seed)
    em, ea = model.errors(rng, np.shape(vm))
    return vm * (1.0 + em), va + ea


def tve(vm_true, va_true, vm_meas, va_meas):
    v = vm_true * np.exp(1j * va_true)
    return np.abs(vm_meas * np.exp(1j * va_meas) - v) / np.abs(v)


# ---------------------------------------------------------------------------
# EM for diagonal mixtures
# ---------------------------------------------------------------------------

@dataclass
class GmmFit:
    weights: np.ndarray     # (C,)
    means: np.ndarray       # (C, d)
    variances: np.ndarray   # (C, d)
    loglik: list            # per-iteration average log-likelihood


def _diag_logpdf(x, means, variances):
    # (n, C)
    diff = x[:, None, :] - means[None]
    return -0.5 * np.sum(np.log(2 * np.pi * variances)[None] + diff * diff / variances[None], axis=2)


def _em_once(x, c, rng, max_iter, tol, floor):
    n, d = x.shape
    means = x[rng.choice(n, size=c, replace=False)].copy()
    variances = np.tile(np.maximum(x.var(axis=0), floor), (c, 1))
    weights = np.full(c, 1.0 / c)
    history = []
    for _ in range(max_iter):
        logp = _diag_logpdf(x, means, variances) + np.log(weights)[None]
        top = logp.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        ll = float(lse.mean())
        if history and ll < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise AssertionError(f"EM log-likelihood decreased: {history[-1]} -> {ll}")
        history.append(ll)
        if len(history) > 1 and ll - history[-2] < tol:
            break
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-8 * n):
            return None
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        # variance floor is the exact constrained M-step, so the ascent property holds
        variances = np.empty_like(means)
        for k in range(c):
            dev = x - means[k]
            variances[k] = resp[:, k] @ (dev * dev) / nk[k]
        variances = np.maximum(variances, floor)
    return GmmFit(weights, means, variances, history)


def fit_gmm_em(samples, c=3, seed=0, max_iter=500, tol=1e-10, restarts=5):
    """Diagonal-covariance Gaussian mixture by EM, restarting on an emptied component.

    Per-channel variances are floored at ``max(1e-6 * channel variance, 1e-12)``
    so channels that never move (PV-bus magnitudes) stay finite.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if c < 1:
        raise DataError("need at least one mixture component")
    if x.shape[0] < 10 * c:
        raise DataError(f"need at least {10 * c} samples for {c} components, got {x.shape[0]}")
    floor = np.maximum(1e-6 * x.var(axis=0), 1e-12)
    if c == 1:
        var = np.maximum(x.var(axis=0), floor)
        ll = float(_diag_logpdf(x, x.mean(axis=0)[None], var[None]).mean())
        return GmmFit(np.ones(1), x.mean(axis=0)[None], var[None], [ll])
    for attempt in range(restarts + 1):
        fit = _em_once(x, c, np.random.default_rng([seed, attempt]), max_iter, tol, floor)
        if fit is not None:
            return fit
        log.info("EM restart %d after a component emptied", attempt + 1)
    raise DataError(f"EM kept collapsing a component after {restarts} restarts")


@dataclass
class GmmFeaturePrior:
    """Per-bus mixture over the (magnitude, angle) feature vector."""

    weights: np.ndarray     # (N, C)
    means: np.ndarray       # (N, C, 2)
    variances: np.ndarray   # (N, C, 2)

    @property
    def components(self):
        return self.weights.shape[1]


def fit_feature_prior(vm, va, c=3, seed=0, **kw):
    """One EM fit per bus on the true-state samples ``vm``, ``va`` of shape (n, N)."""
    n_bus = vm.shape[1]
    w = np.empty((n_bus, c))
    mu = np.empty((n_bus, c, 2))
    var = np.empty((n_bus, c, 2))
    for i in range(n_bus):
        fit = fit_gmm_em(np.column_stack([vm[:, i], va[:, i]]), c=c, seed=seed + i, **kw)
        w[i], mu[i], var[i] = fit.weights, fit.means, fit.variances
    return GmmFeaturePrior(w, mu, var)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class SnapshotDataset:
    grid_hash: str
    pmu_buses: list           # bus ids, in feature order
    mask: np.ndarray          # (N,) bool, bus order
    vm: np.ndarray            # (n, N) true magnitudes
    va: np.ndarray            # (n, N) true angles, rad
    measured: np.ndarray      # (n, P, 2) noisy PMU features
    loads: np.ndarray         # (n, n_load) MW
    load_buses: list
    noise: dict
    seed: int
    case_name: str = "case"
    case_text: str = ""       # serialized grid, so the file is self-contained
    components: int = 3       # mixture components requested for the feature prior

    def __len__(self):
        return self.vm.shape[0]

    @property
    def n_bus(self):
        return self.vm.shape[1]

    def targets(self):
        return np.stack([self.vm, self.va], axis=-1)

    def features(self):
        """(n, N, 2) feature matrix with zeros at buses without a PMU."""
        x = np.zeros((len(self), self.n_bus, 2))
        x[:, self.mask] = self.measured
        return x

    def subset(self, idx):
        idx = np.asarray(idx)
        return SnapshotDataset(self.grid_hash, list(self.pmu_buses), self.mask.copy(), self.vm[idx],
                               self.va[idx], self.measured[idx], self.loads[idx], list(self.load_buses),
                               dict(self.noise), self.seed, self.case_name, self.case_text, self.components)


def pmu_mask(g, pmu_buses):
    if not len(pmu_buses):
        raise DataError("at least one PMU bus is required")
    if len(set(pmu_buses)) != len(pmu_buses):
        raise DataError(f"duplicate PMU buses in {list(pmu_buses)}")
    mask = np.zeros(g.n_bus, dtype=bool)
    for b in pmu_buses:
        if b not in g.index:
            raise DataError(f"PMU bus {b} is not in the grid")
        mask[g.index[b]] = True
    return mask


def build_dataset(g, states, pmu_buses, noise, seed, components=3):
    """Attach noisy PMU features to solved states."""
    mask = pmu_mask(g, pmu_buses)
    pmu_buses = sorted(pmu_buses, key=lambda b: g.index[b])
    vm_m, va_m = apply_noise(states.vm[:, mask], states.va[:, mask], noise, [seed, 1])
    measured = np.stack([vm_m, va_m], axis=-1)
    return SnapshotDataset(g.digest(), pmu_buses, mask, states.vm, states.va, measured,
                           states.loads, list(states.load_buses), noise.to_dict(), int(seed), g.name,
                           serialize_case(g), int(components))


def write_dataset(path, ds):
    meta = {"format": "cgnnse-dataset", "version": DATASET_VERSION, "grid_hash": ds.grid_hash,
            "pmu_buses": [int(b) for b in ds.pmu_buses], "load_buses": [int(b) for b in ds.load_buses],
            "noise": ds.noise, "seed": ds.seed, "case_name": ds.case_name,
            "case_text": ds.case_text, "components": ds.components}
    write_container(path, DATASET_MAGIC, meta, {
        "mask": ds.mask, "vm": ds.vm, "va": ds.va, "measured": ds.measured, "loads": ds.loads})


def read_dataset(path, grid=None):
    meta, blocks = read_container(path, DATASET_MAGIC)
    if meta.get("version") != DATASET_VERSION:
        raise DataError(f"dataset format version {meta.get('version')} is not {DATASET_VERSION}")
    if grid is not None and grid.digest() != meta["grid_hash"]:
        raise DataError("dataset was generated for a different grid (hash mismatch)")
    return SnapshotDataset(meta["grid_hash"], meta["pmu_buses"], blocks["mask"].astype(bool),
                           blocks["vm"], blocks["va"], blocks["measured"], blocks["loads"],
                           meta["load_buses"], meta["noise"], meta["seed"], meta.get("case_name", "case"),
                           meta.get("case_text", ""), meta.get("components", 3))
