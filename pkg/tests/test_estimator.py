import numpy as np
import pytest

from cgnnse import bddc
from cgnnse.estimator import SchemaError, StateEstimator


@pytest.fixture(scope="module")
def est(small_model, small_dataset, case14):
    stats = bddc.fit_stats(small_dataset.measured, small_dataset.pmu_buses)
    return StateEstimator(small_model, case14, stats, alpha=0.01)


def test_matches_batch_prediction(est, small_dataset):
    z = small_dataset.measured[3]
    states, rep, ms = est.estimate(z, screen=False)
    assert rep is None and ms >= 0
    assert np.allclose(states, est.model.predict(small_dataset.features()[3]), rtol=0, atol=1e-14)


def test_screening_replaces_outlier(est, small_dataset):
    z = small_dataset.measured[3].copy()
    z[0, 0] += 20 * est.stats.std[0, 0]
    states, rep, _ = est.estimate(z)
    assert rep.flags[0, 0]
    clean = z.copy()
    clean[0, 0] = est.stats.mean[0, 0]
    assert np.array_equal(states, est.estimate(clean, screen=False)[0])


def test_failed_pmu_uses_prior(est, small_dataset):
    z = small_dataset.measured[0]
    ok = np.array([True, False, True])
    states, _, _ = est.estimate(z, available=ok, screen=False)
    mask = est.model.mask.copy()
    mask[np.flatnonzero(mask)[1]] = False
    assert np.array_equal(states, est.model.predict(small_dataset.features()[0], mask))


def test_outage_adjacency_cached(est, case14):
    k = est.branch_index("2-3")
    assert k == case14.find_branch(2, 3) == est.branch_index("3-2")
    assert est.adjacency([k]) is est.adjacency((k,))
    with pytest.raises(SchemaError):
        est.branch_index("2to3")


def test_parse_record(est):
    rec = {"bus": [13, 4, 9], "vm_pu": [1.0, 1.01, None], "va_deg": [-10.0, -5.0, -8.0]}
    z, ok = est.parse_record(rec)
    assert ok.tolist() == [True, False, True]
    assert z[0, 0] == 1.01 and z[2, 1] == pytest.approx(np.deg2rad(-10.0))
    with pytest.raises(SchemaError):
        est.parse_record({"bus": [4, 9], "vm_pu": [1, 1], "va_deg": [0, 0]})


def test_bad_alpha(small_model, case14):
    with pytest.raises(ValueError):
        StateEstimator(small_model, case14, alpha=0.0)
