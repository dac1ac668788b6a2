import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cgnnse import bddc
from cgnnse.numerics import ShapeError


def _stats(p=3, mean=1.0, std=0.01):
    return bddc.ChannelStats(tuple(range(p)), np.full((p, 2), mean), np.full((p, 2), std))


class TestFitStats:
    def test_recovers_known_moments(self):
        z = np.random.default_rng(0).normal(1.0, 0.01, size=(100_000, 4, 2))
        s = bddc.fit_stats(z, [1, 2, 3, 4])
        assert np.all(np.abs(s.mean - 1.0) < 0.01 * 0.01)
        assert np.all(np.abs(s.std / 0.01 - 1) < 0.01)
        assert s.pmu_buses == (1, 2, 3, 4)

    def test_disjoint_samples_agree(self):
        rng = np.random.default_rng(1)
        a = bddc.fit_stats(rng.normal(1.0, 0.01, size=(20_000, 3, 2)))
        b = bddc.fit_stats(rng.normal(1.0, 0.01, size=(20_000, 3, 2)))
        se = 0.01 * np.sqrt(2.0 / 20_000)
        assert np.all(np.abs(a.mean - b.mean) < 3 * se)

    def test_zero_variance(self):
        z = np.random.default_rng(2).normal(size=(40, 2, 2))
        z[:, 1, 0] = 1.0
        with pytest.raises(bddc.StatsError, match="zero variance"):
            bddc.fit_stats(z)

    def test_too_few_snapshots(self):
        with pytest.raises(bddc.StatsError):
            bddc.fit_stats(np.random.default_rng(0).normal(size=(29, 2, 2)))

    def test_shape(self):
        with pytest.raises(ShapeError):
            bddc.fit_stats(np.zeros((40, 3)))

    def test_dict_round_trip(self):
        s = _stats()
        back = bddc.ChannelStats.from_dict(json.loads(json.dumps(s.to_dict())))
        assert np.array_equal(back.mean, s.mean) and back.pmu_buses == s.pmu_buses


class TestThreshold:
    def test_known_quantiles(self):
        assert bddc.threshold(0.05) == pytest.approx(1.959964, abs=1e-6)
        assert bddc.threshold(0.01) == pytest.approx(2.575829, abs=1e-6)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
    def test_rejects_out_of_range(self, alpha):
        with pytest.raises(ValueError):
            bddc.threshold(alpha)

    @given(st.floats(1e-6, 0.5))
    def test_monotone(self, alpha):
        assert bddc.threshold(alpha) >= bddc.threshold(min(2 * alpha, 0.999))


class TestScreen:
    def test_corrections_only_at_flags(self):
        s = _stats()
        z = np.full((3, 2), 1.0)
        z[0, 1] += 0.1           # 10 sigma
        z[2, 0] -= 0.02          # 2 sigma, below the 1 % threshold
        fixed, rep = bddc.screen(z, s, 0.01)
        assert rep.flags.tolist() == [[False, True], [False, False], [False, False]]
        assert fixed[0, 1] == 1.0 and fixed[2, 0] == z[2, 0]
        assert rep.corrections == {1: (z[0, 1], 1.0)}
        assert rep.n_flagged == 1

    def test_batch_input(self):
        s = _stats()
        z = np.full((5, 3, 2), 1.0)
        z[3, 1, 1] = 2.0
        fixed, rep = bddc.screen(z, s)
        assert rep.flags.shape == z.shape and rep.n_flagged == 1 and fixed[3, 1, 1] == 1.0

    def test_json(self):
        z = np.full((3, 2), 1.0)
        z[1, 0] = 0.5
        _, rep = bddc.screen(z, _stats(), 0.05)
        d = json.loads(rep.to_json())
        assert d["alpha"] == 0.05 and d["corrections"] == {"2": [0.5, 1.0]}
        assert np.array(d["flags"]).sum() == 1

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            bddc.screen(np.zeros((4, 2)), _stats(3))

    def test_clean_flag_rate(self):
        rng = np.random.default_rng(5)
        z = rng.normal(1.0, 0.01, size=(50_000, 3, 2))
        _, rep = bddc.screen(z, _stats(), 0.05)
        rate = rep.flags.mean()
        assert abs(rate - 0.05) < 4 * np.sqrt(0.05 * 0.95 / rep.flags.size)

    @given(st.floats(-50, 50))
    def test_flag_iff_beyond_threshold(self, k):
        s = _stats(1)
        z = np.array([[1.0 + k * 0.01, 1.0]])
        _, rep = bddc.screen(z, s, 0.01)
        assert bool(rep.flags[0, 0]) == (abs(z[0, 0] - 1.0) / 0.01 > bddc.threshold(0.01))

    @given(st.lists(st.floats(-30, 30), min_size=6, max_size=6), st.floats(1e-4, 0.5))
    def test_idempotent(self, devs, alpha):
        s = _stats()
        z = 1.0 + 0.01 * np.array(devs).reshape(3, 2)
        once, _ = bddc.screen(z, s, alpha)
        twice, rep = bddc.screen(once, s, alpha)
        assert np.array_equal(once, twice) and rep.n_flagged == 0
