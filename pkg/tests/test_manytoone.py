import math

import numpy as np
import pytest

from rbwalk.environment import c0_for_family, make_family, sample_generation_potentials
from rbwalk.manytoone import (
    LimitLawContext, WinfPool, cinf_partial_sums, estimate_cinf, sample_S_step, sample_winf,
    second_moment_fixed_point,
)
from rbwalk.stats import ks_two_sample

from conftest import mean_se, within_se


class TestStep:
    def test_moments(self, family, rng):
        s = sample_S_step(family, rng, 400_000)
        m, se = mean_se(s)
        assert within_se(m, math.log(2) - 0.25, se)
        v, vse = mean_se((s - s.mean()) ** 2)
        assert within_se(v, 0.5, vse)

    @pytest.mark.parametrize("f", [lambda v: v, lambda v: v**2, lambda v: (v > 0).astype(float)],
                             ids=["v", "v2", "positive"])
    def test_many_to_one(self, family, rng, f):
        v = sample_generation_potentials(family, 1, 300_000, rng)
        lhs = (np.exp(-v) * f(v)).sum(axis=1)
        rhs = f(sample_S_step(family, rng, 300_000))
        m1, s1 = mean_se(lhs)
        m2, s2 = mean_se(rhs)
        assert abs(m1 - m2) <= 3 * math.hypot(s1, s2)

    def test_two_step_many_to_one(self, family, rng):
        v = sample_generation_potentials(family, 2, 200_000, rng)
        lhs = (np.exp(-v) * v).sum(axis=1)
        rhs = sample_S_step(family, rng, (200_000, 2)).sum(axis=1)
        m1, s1 = mean_se(lhs)
        m2, s2 = mean_se(rhs)
        assert abs(m1 - m2) <= 3 * math.hypot(s1, s2)


class TestCinf:
    def test_zero_truncation(self, family, rng):
        est = estimate_cinf(family, J=0, R=100, rng=rng)
        assert est.value == 1.0

    def test_monotone_in_truncation(self, family, rng):
        sums = cinf_partial_sums(family, 80, 2000, rng)
        assert np.all(np.diff(sums, axis=1) <= 0)
        assert np.all(sums[:, 0] == 1.0)

    def test_adaptive_value(self, family):
        est = estimate_cinf(family, R=100_000, rng=np.random.default_rng(5))
        assert est.se < 0.002
        assert 0 < est.value <= 1
        # frozen from an independent plain-numpy run with J=400, R=4e5
        assert abs(est.value - 0.327210) <= 3 * math.hypot(est.se, 0.000289)


class TestWinf:
    def test_depth_zero(self, family, rng):
        pool = sample_winf(family, 0, 50, rng)
        assert np.all(pool.values == 1.0) and pool.depth == 0

    @pytest.mark.parametrize("k", [3, 12, 30])
    def test_mean_one(self, family, k):
        pool = sample_winf(family, k, 40_000, np.random.default_rng(k))
        assert np.all(pool.values >= 0)
        assert within_se(pool.values.mean(), 1.0, pool.mean_se)

    def test_second_moment_fixed_point(self, family):
        assert second_moment_fixed_point(family) == pytest.approx(c0_for_family(family), rel=1e-12)
        # E[W_k^2] = c0 (1 - exp(k psi(2))) + exp(k psi(2)) exactly at finite depth
        k = 10
        q = math.exp(k * (0.5 - math.log(2)))
        exact = c0_for_family(family) * (1 - q) + q
        w = sample_winf(family, k, 200_000, np.random.default_rng(3), block_depth=k).values
        m, se = mean_se(w**2)
        assert within_se(m, exact, se)

    def test_smoothing_transform(self, family, rng):
        pool = sample_winf(family, 8, 60_000, rng)
        v = sample_generation_potentials(family, 1, 60_000, rng)
        composed = (np.exp(-v) * pool.draw(rng, v.shape)).sum(axis=1)
        fresh = sample_winf(family, 9, 60_000, rng).values
        assert ks_two_sample(composed, fresh)[1] > 0.001

    def test_csv_round_trip(self, family, rng, tmp_path):
        pool = sample_winf(family, 4, 200, rng)
        pool.to_csv(tmp_path / "pool.csv")
        back = WinfPool.from_csv(tmp_path / "pool.csv", depth=4)
        assert np.array_equal(back.values, pool.values)


class TestContext:
    def test_validation(self, family):
        pool = WinfPool(np.ones(10), 1)
        with pytest.raises(ValueError):
            LimitLawContext(0.0, 0.3, 0.01, pool)
        with pytest.raises(ValueError):
            LimitLawContext(1.0, 1.5, 0.01, pool)
        with pytest.raises(ValueError):
            LimitLawContext(1.0, 0.3, 0.01, WinfPool(-np.ones(3), 1))

    def test_ternary_family_pool(self):
        fam = make_family("d-ary-gaussian", d=3, sigma2=0.5)
        pool = sample_winf(fam, 7, 20_000, np.random.default_rng(1))
        assert within_se(pool.values.mean(), 1.0, pool.mean_se)
