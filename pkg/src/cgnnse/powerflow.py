"""Full Newton-Raphson AC power flow in polar coordinates (dense)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import PQ, PV, SLACK


class PowerFlowError(RuntimeError):
    pass


class NonConvergence(PowerFlowError):
    def __init__(self, iterations, mismatch):
        self.iterations = iterations
        self.mismatch = mismatch
        super().__init__(f"no convergence after {iterations} iterations, worst mismatch {mismatch:.3e} p.u.")


@dataclass(frozen=True)
class PowerFlowSolution:
    vm: np.ndarray
    va: np.ndarray
    iterations: int
    mismatch: float

    @property
    def voltage(self):
        return self.vm * np.exp(1j * self.va)


def build_ybus(g):
    """Bus admittance matrix with taps, phase shifters, line charging and bus shunts."""
    n = g.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in g.branches:
        if not br.in_service:
            continue
        z = complex(br.r, br.x)
        if z == 0:
            raise PowerFlowError(f"zero-impedance branch {br.f}-{br.t}")
        ys = 1.0 / z
        tap = (br.ratio if br.ratio != 0 else 1.0) * np.exp(1j * np.deg2rad(br.angle))
        ytt = ys + 0.5j * br.b
        i, j = g.index[br.f], g.index[br.t]
        y[i, i] += ytt / (tap * np.conj(tap))
        y[j, j] += ytt
        y[i, j] += -ys / np.conj(tap)
        y[j, i] += -ys / tap
    for k, b in enumerate(g.buses):
        y[k, k] += complex(b.gs, b.bs) / g.base_mva
    return y


def bus_injections(g):
    """Scheduled complex injections S = Sgen - Sload in p.u."""
    s = np.array([-complex(b.pd, b.qd) for b in g.buses])
    for gen in g.gens:
        if gen.status > 0:
            s[g.index[gen.bus]] += complex(gen.pg, gen.qg)
    return s / g.base_mva


def _bus_sets(g):
    types = np.array([b.type for b in g.buses])
    has_gen = np.zeros(g.n_bus, dtype=bool)
    for gen in g.gens:
        if gen.status > 0:
            has_gen[g.index[gen.bus]] = True
    # a PV bus without an online generator behaves as PQ
    pv = np.flatnonzero((types == PV) & has_gen)
    pq = np.flatnonzero((types == PQ) | ((types == PV) & ~has_gen))
    ref = np.flatnonzero(types == SLACK)
    return ref, pv, pq


def _initial_voltage(g):
    vm = np.ones(g.n_bus)
    for gen in g.gens:
        if gen.status > 0:
            k = g.index[gen.bus]
            if g.buses[k].type in (PV, SLACK):
                vm[k] = gen.vg
    return vm, np.zeros(g.n_bus)


def _mismatch(ybus, v, sbus, pv, pq):
    mis = v * np.conj(ybus @ v) - sbus
    pvpq = np.r_[pv, pq]
    return np.r_[mis.real[pvpq], mis.imag[pq]]


def power_mismatch(g, vm, va, ybus=None):
    """Worst power-balance residual (p.u.) of a voltage profile on the constrained equations."""
    ybus = build_ybus(g) if ybus is None else ybus
    _, pv, pq = _bus_sets(g)
    f = _mismatch(ybus, vm * np.exp(1j * va), bus_injections(g), pv, pq)
    return float(np.max(np.abs(f))) if f.size else 0.0


def _jacobian(ybus, v, pv, pq):
    ibus = ybus @ v
    vnorm = v / np.abs(v)
    dv = np.diag(v)
    ds_dvm = dv @ np.conj(ybus @ np.diag(vnorm)) + np.diag(np.conj(ibus) * vnorm)
    ds_dva = 1j * dv @ np.conj(np.diag(ibus) - ybus @ dv)
    pvpq = np.r_[pv, pq]
    j11 = ds_dva[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dva[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def solve(g, tolerance=1e-8, max_iter=30):
    """Newton-Raphson power flow from a flat start (setpoint magnitudes, zero angles)."""
    ybus = build_ybus(g)
    sbus = bus_injections(g)
    ref, pv, pq = _bus_sets(g)
    vm, va = _initial_voltage(g)
    v = vm * np.exp(1j * va)
    pvpq = np.r_[pv, pq]
    npvpq = len(pvpq)

    f = _mismatch(ybus, v, sbus, pv, pq)
    worst = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    while worst >= tolerance:
        if it >= max_iter:
            raise NonConvergence(it, worst)
        jac = _jacobian(ybus, v, pv, pq)
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular Jacobian at iteration {it}") from exc
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        v = vm * np.exp(1j * va)
        it += 1
        f = _mismatch(ybus, v, sbus, pv, pq)
        worst = float(np.max(np.abs(f)))
        if not np.isfinite(worst):
            raise NonConvergence(it, worst)
    va = va - va[ref[0]]
    return PowerFlowSolution(vm.copy(), va.copy(), it, worst)


def branch_flows(g, vm, va):
    """Complex power (p.u.) entering each branch at its from-end; zero for open branches."""
    v = vm * np.exp(1j * va)
    out = np.zeros(len(g.branches), dtype=complex)
    for k, br in enumerate(g.branches):
        if not br.in_service:
            continue
        ys = 1.0 / complex(br.r, br.x)
        tap = (br.ratio if br.ratio != 0 else 1.0) * np.exp(1j * np.deg2rad(br.angle))
        i, j = g.index[br.f], g.index[br.t]
        i_f = (ys + 0.5j * br.b) / (tap * np.conj(tap)) * v[i] - ys / np.conj(tap) * v[j]
        out[k] = v[i] * np.conj(i_f)
    return out
