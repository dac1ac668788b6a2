"""Acceptance gate: one test per criterion, each recorded in the terminal summary.

Criterion 6 (118-bus) runs only with CGNNSE_FULLSCALE=1.
"""
import time

import numpy as np
import pytest

from cgnnse import bddc, datagen, evaluation as ev, stability
from cgnnse.estimator import StateEstimator
from cgnnse.gnn import Architecture, expected_activation, gcn_forward
from cgnnse.grid import load_case
from cgnnse.train import init_model, fit, split_indices
from conftest import DESK_TRAIN, fullscale_enabled
from oracles import gradient_errors, mc_expected_activation, random_graph, random_mask, random_mixture, \
    random_model, randomize


def _base(desk):
    model = desk.setup.trained()
    test = desk.setup.test_slice()
    return model, test, ev.metrics(model.predict(test.features()), test.targets())


def test_c01_expected_activation_oracle(criterion):
    rng = np.random.default_rng(2024)
    samples = 1_000_000
    worst, fails = 0.0, 0
    for k in range(50):
        c = 1 + k % 3
        adj = random_graph(rng, 5)
        logits, means, logvar = random_mixture(rng, 5, c)
        w, x, mask = rng.normal(size=(3, 2)), rng.normal(size=(5, 2)), random_mask(rng, 5)
        out = expected_activation(w, logits, means, logvar, adj.a_tilde, x, mask).value[0]
        mc, se = mc_expected_activation(w, logits, means, logvar, adj.a_tilde, x, mask, samples, rng)
        # The sample SE is zero for entries with no unobserved feeder and for
        # events too rare to be hit once in 10^6 draws; 1/samples is the
        # resolution floor in those cases.
        tol = 4 * se + max(1.0, float(np.abs(mc).max())) / samples
        worst = max(worst, float(np.max(np.abs(out - mc) / tol)))
        fails += int(np.any(np.abs(out - mc) > tol))
    criterion(1, fails == 0, f"50 configs, worst |error| / (4 SE + resolution) = {worst:.3f}, {fails} failing")


def test_c02_full_observability(criterion):
    rng = np.random.default_rng(7)
    equal = 0
    for k in range(100):
        n, c = int(rng.integers(3, 9)), int(rng.integers(1, 4))
        adj = random_graph(rng, n)
        logits, means, logvar = random_mixture(rng, n, c)
        w, x = rng.normal(size=(int(rng.integers(1, 6)), 2)), rng.normal(size=(n, 2))
        out = expected_activation(w, logits, means, logvar, adj.a_tilde, x, np.ones(n, bool)).value[0]
        equal += int(np.array_equal(out, gcn_forward(w, adj.a_tilde, x).value))
    criterion(2, equal == 100, f"{equal}/100 instances bitwise equal")


def test_c03_gradients(criterion):
    rng = np.random.default_rng(3)
    worst = {}
    for _ in range(20):
        model = random_model(rng, n=5)
        randomize(model, rng)
        x = np.where(model.mask[None, :, None], rng.normal(size=(3, 5, 2)), 0.0)
        errs, _ = gradient_errors(model, x, rng.normal(size=(3, 5, 2)))
        for name, e in errs.items():
            worst[name] = max(worst.get(name, 0.0), e)
    kinds = {n.rsplit(".", 1)[1] for n in worst}
    covered = {"weight", "att", "logits", "means", "logvar"} <= kinds
    top = max(worst.values())
    criterion(3, covered and top < 1e-4,
              f"20 points, worst relative error {top:.2e} ({max(worst, key=worst.get)}); kinds {sorted(kinds)}")


def test_c04_stability_sweep(criterion, desk):
    model, test, _ = _base(desk)
    rows = []
    for k in (1, 2, 3):
        rows += stability.sweep_contingencies(model, desk.grid, test, k=k, snapshots=(0,), cap=50, seed=0)
    bad = [r for r in rows if not r.holds]
    ratio = max(r.measured / r.bound for r in rows if r.bound > 0)
    detail = f"{len(rows)} certificates (N-1 exhaustive, 50 N-2, 50 N-3), {len(bad)} violations, " \
             f"max measured/bound {ratio:.2e}"
    if bad:
        detail += "; " + "; ".join(str(r.row()) for r in bad[:3])
    criterion(4, not bad, detail)


def test_c05_desk_quality(criterion, desk):
    _, test, base = _base(desk)
    clim = ev.climatology(desk.setup.train.targets())
    ref = ev.metrics(np.broadcast_to(clim, test.targets().shape), test.targets())
    ok = base.mape < 0.5 and base.mae_deg < 0.5 and ref.mape >= 5 * base.mape and ref.mae_deg >= 5 * base.mae_deg
    criterion(5, ok, f"MAPE {base.mape:.4f}% MAE {base.mae_deg:.4f} deg; climatology "
                     f"{ref.mape:.4f}% / {ref.mae_deg:.4f} deg ({ref.mape / base.mape:.1f}x / "
                     f"{ref.mae_deg / base.mae_deg:.1f}x)")


def test_c06_fullscale(criterion):
    if not fullscale_enabled():
        criterion.skip(6, "set CGNNSE_FULLSCALE=1 to run the 118-bus check")
        pytest.skip("118-bus check disabled")
    g = load_case("ieee118")
    pmus = g.highest_voltage_buses()
    lm = datagen.fit_load_model(datagen.synthetic_load_history(g, 2000, seed=1))
    states = datagen.generate_snapshots(g, lm, 5000, seed=3)
    ds = datagen.build_dataset(g, states, pmus, datagen.NoiseModel.gaussian(0.01), 5)
    train, test = ds.subset(np.arange(4000)), ds.subset(np.arange(4000, 5000))
    tr, _ = split_indices(len(train), DESK_TRAIN.validation_fraction, DESK_TRAIN.seed)
    model, _ = fit(init_model(train, g, Architecture(), seed=0, train_idx=tr), train, DESK_TRAIN)
    m = ev.metrics(model.predict(test.features()), test.targets())
    est = StateEstimator(model, g, bddc.fit_stats(train.measured, train.pmu_buses))
    times = [est.estimate(test.measured[i % len(test)])[2] for i in range(1000)]
    criterion(6, m.mape < 0.1 and m.mae_deg < 0.1 and np.median(times) < 33,
              f"{len(pmus)} PMUs, MAPE {m.mape:.4f}% MAE {m.mae_deg:.4f} deg, median latency "
              f"{np.median(times):.2f} ms")


def test_c07_topology(criterion, desk):
    out = ev.run_study("topology", desk.setup, {"outages": 5})
    base = out["rows"][0]["mape"]
    cases = out["rows"][1:]
    ok = len(cases) == 5 and all(r["mape"] < 5 * base and r["mape"] < 1.0 for r in cases)
    detail = f"base {base:.4f}%; " + ", ".join(f"{r['case']} {r['mape']:.4f}% ({r['ratio']:.1f}x)" for r in cases)
    criterion(7, ok, detail)


def test_c08_pmu_failure(criterion, desk):
    model, test, base = _base(desk)
    clim = ev.climatology(desk.setup.train.targets())
    ref = ev.metrics(np.broadcast_to(clim, test.targets().shape), test.targets())
    parts, ok = [], True
    for b in test.pmu_buses:
        mask = test.mask.copy()
        mask[desk.grid.index[b]] = False
        m = ev.metrics(model.predict(test.features(), mask), test.targets())
        ok &= m.mape < 10 * base.mape and m.mape < ref.mape and m.mae_deg < ref.mae_deg
        parts.append(f"drop {b}: {m.mape:.4f}% ({m.mape / base.mape:.1f}x)")
    criterion(8, ok, f"base {base.mape:.4f}%, climatology {ref.mape:.4f}%; " + ", ".join(parts))


def test_c09_wald_screen(criterion, desk):
    rng = np.random.default_rng(9)
    stats = bddc.fit_stats(rng.normal(1.0, 0.01, size=(200_000, 1, 2)))
    clean = rng.normal(1.0, 0.01, size=(500_000, 1, 2))          # 10^6 channel draws
    rates = {a: float(bddc.screen(clean, stats, a)[1].flags.mean()) for a in (0.01, 0.05)}
    calibrated = all(0.8 * a <= r <= 1.2 * a for a, r in rates.items())

    sign = rng.choice([-1.0, 1.0], size=clean.shape)
    at_five = stats.mean + sign * 5 * stats.std
    five_rate = float(bddc.screen(at_five, stats, 0.01)[1].flags.mean())
    additive = float(bddc.screen(clean + sign * 5 * stats.std, stats, 0.01)[1].flags.mean())

    model, test, base = _base(desk)
    tstats = bddc.fit_stats(desk.setup.train.measured, desk.setup.train.pmu_buses)
    bad, _ = ev.inject_outliers(test.measured, tstats, 0.3, np.random.default_rng(10), low=10.0, high=10.0)
    fixed, _ = bddc.screen(bad, tstats, 0.01)
    x_bad, x_fix = test.features(), test.features()
    x_bad[:, test.mask], x_fix[:, test.mask] = bad, fixed
    unscreened = ev.metrics(model.predict(x_bad), test.targets()).mape
    screened = ev.metrics(model.predict(x_fix), test.targets()).mape
    ok = calibrated and five_rate >= 0.999 and screened < 2 * base.mape and unscreened > 5 * base.mape
    criterion(9, ok, f"flag rate {rates[0.01]:.5f} @0.01, {rates[0.05]:.5f} @0.05; 5-sigma deviations flagged "
                     f"{five_rate:.4f} (5-sigma added to noisy draws: {additive:.4f}); 30% at 10 sigma: screened "
                     f"{screened / base.mape:.2f}x, unscreened {unscreened / base.mape:.1f}x clean MAPE")


def test_c10_gmm_noise(criterion, desk):
    _, _, base = _base(desk)
    row = ev.run_study("noise", desk.setup, {"noises": ["gmm"]})["rows"][0]
    ok = row["mape"] < 2 * base.mape and row["mae_deg"] < 2 * base.mae_deg
    criterion(10, ok, f"Gaussian {base.mape:.4f}% / {base.mae_deg:.4f} deg; GMM {row['mape']:.4f}% / "
                      f"{row['mae_deg']:.4f} deg ({row['mape'] / base.mape:.2f}x / {row['mae_deg'] / base.mae_deg:.2f}x)")


def test_c11_latency(criterion, desk):
    model, test, _ = _base(desk)
    est = StateEstimator(model, desk.grid, bddc.fit_stats(desk.setup.train.measured, desk.setup.train.pmu_buses))
    for i in range(20):
        est.estimate(test.measured[i])
    times = []
    for i in range(1000):
        t0 = time.perf_counter()
        est.estimate(test.measured[i % len(test)])
        times.append(1e3 * (time.perf_counter() - t0))
    med = float(np.median(times))
    criterion(11, med < 33.0, f"median {med:.3f} ms, p99 {np.percentile(times, 99):.3f} ms over 1000 calls")


def test_c12_em_recovery(criterion):
    rng = np.random.default_rng(12)
    comp = rng.random(100_000) < 0.3
    x = np.where(comp, rng.normal(0.0, 1.0, comp.size), rng.normal(5.0, 1.0, comp.size))
    fit = datagen.fit_gmm_em(x, c=2)
    order = np.argsort(fit.means[:, 0])
    got = {"pi": fit.weights[order], "mu": fit.means[order, 0], "sigma": np.sqrt(fit.variances[order, 0])}
    true = {"pi": np.array([0.3, 0.7]), "mu": np.array([0.0, 5.0]), "sigma": np.array([1.0, 1.0])}
    # a zero true mean has no relative scale; unit scale is used there
    err = {k: float(np.max(np.abs(got[k] - true[k]) / np.maximum(np.abs(true[k]), 1.0))) for k in true}
    criterion(12, max(err.values()) < 0.02, ", ".join(f"{k} {got[k].round(4).tolist()} err {err[k]:.4f}"
                                                      for k in true))


def test_c13_power_flow_verification(criterion, desk):
    worst = datagen.verify_states(desk.grid, desk.states)
    criterion(13, worst < 1e-8, f"{len(desk.states)} snapshots, worst mismatch {worst:.2e} p.u.")


def test_c14_ablations(criterion, desk):
    att = {r["case"]: r for r in ev.run_study("attention_ablation", desk.setup)["rows"]}
    heads = {r["heads"]: r for r in ev.run_study("head_sweep", desk.setup, {"heads": [1, 2, 4]})["rows"]}
    gat, gcn = att["MH-GAT"]["val_mape"], att["GCN substitute"]["val_mape"]
    ok = gcn >= 2 * gat and heads[4]["val_mape"] <= heads[1]["val_mape"]
    criterion(14, ok, f"validation MAPE MH-GAT {gat:.4f}%, GCN substitute {gcn:.4f}% ({gcn / gat:.2f}x); "
                      + ", ".join(f"K={k} {heads[k]['val_mape']:.4f}%" for k in (1, 2, 4)))
