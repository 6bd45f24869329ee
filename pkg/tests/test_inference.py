import numpy as np
import pytest
from oracles import known_model, uniform_sphere
from scipy import stats

from deepspar import inference as inf
from deepspar import spar
from deepspar.dataio import synth_gaussian_copula
from deepspar.errors import InfeasibleRegionError, ModelStateError, ResolutionError


@pytest.fixture(scope="module")
def truth():
    return known_model(d=2, c=3.0, sigma=2.0, xi=0.2, alpha=0.15)


class TestSimulateTail:
    def test_in_joint_tail(self, truth):
        x = inf.simulate_tail(truth, 1_000_000, np.random.default_rng(0))
        assert truth.tail_mask(x).all()

    def test_angles_from_stored_set(self, truth):
        x, idx = inf.simulate_tail(truth, 1000, np.random.default_rng(1), return_index=True)
        w = x / np.linalg.norm(x, axis=1, keepdims=True)
        np.testing.assert_allclose(w, truth.exceedance_angles[idx], atol=1e-12)

    def test_radial_excess_ks(self, truth):
        x = inf.simulate_tail(truth, 100_000, np.random.default_rng(2))
        excess = np.linalg.norm(x, axis=1) - 3.0
        assert stats.kstest(excess, stats.genpareto(0.2, scale=2.0).cdf).pvalue > 0.01

    def test_reproducible(self, truth):
        a = inf.simulate_tail(truth, 500, np.random.default_rng(3))
        b = inf.simulate_tail(truth, 500, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)


class TestSampleBody:
    class Forced:
        def integers(self, low, high, size):
            return np.full(size, 7)

    def test_in_body(self, truth):
        x = inf.sample_body(truth, 100_000, np.random.default_rng(4))
        assert not truth.tail_mask(x).any()

    def test_forced_index(self, truth):
        np.testing.assert_array_equal(inf.sample_body(truth, 1, self.Forced())[0], truth.body_points[7])

    def test_mean(self, truth):
        x = inf.sample_body(truth, 200_000, np.random.default_rng(5))
        body = truth.body_points
        se = body.std(axis=0) / np.sqrt(len(x))
        assert np.all(np.abs(x.mean(axis=0) - body.mean(axis=0)) < 3 * se + 1e-12)

    def test_empty(self):
        m = spar.constant_model(2, 1.0, 1.0, 0.1, 0.15, np.array([[1.0, 0.0]]), np.zeros((0, 2)))
        with pytest.raises(ModelStateError):
            inf.sample_body(m, 5, np.random.default_rng())


class TestSimulateMixture:
    def test_tail_fraction(self, truth):
        x = inf.simulate(truth, 100_000, np.random.default_rng(6))
        frac = truth.tail_mask(x).mean()
        assert abs(frac - 0.15) < 3 * np.sqrt(0.15 * 0.85 / 1e5)


class TestEstimateProbability:
    def test_tail_region_is_alpha(self, gaussian_model):
        r = inf.estimate_probability(gaussian_model, inf.tail_region(), 10_000, np.random.default_rng(7))
        assert r.probability == gaussian_model.alpha

    def test_everything_is_one(self, gaussian_model):
        r = inf.estimate_probability(gaussian_model, inf.everywhere(), 10_000, np.random.default_rng(8))
        assert r.probability == 1.0

    def test_complement_sums_to_one(self, gaussian_model):
        tail = inf.simulate_tail(gaussian_model, 50_000, np.random.default_rng(9))
        for region in (inf.marginal_above(0, 1.5, 2), inf.sum_below(-1.0), inf.joint_above([0.5, -0.2], "centred")):
            p = inf.estimate_probability(gaussian_model, region, tail_sample=tail).probability
            q = inf.estimate_probability(gaussian_model, region.complement(), tail_sample=tail).probability
            assert p + q == pytest.approx(1.0, abs=1e-15)

    def test_return_period_arithmetic(self, gaussian_model):
        r = inf.estimate_probability(gaussian_model, inf.marginal_above(0, 2.5, 2), 20_000, np.random.default_rng(10))
        assert r.return_period_years * r.probability * r.blocks_per_year == pytest.approx(1.0, rel=1e-15)
        assert 0.0 <= r.probability <= 1.0

    def test_body_disjoint_skip(self, gaussian_model):
        q_max, _ = inf.quantile_set_extremes(gaussian_model)
        region = inf.marginal_above(0, q_max[0] + 0.01, 2)
        assert region.body_disjoint(gaussian_model)
        assert not inf.marginal_above(0, 0.0, 2).body_disjoint(gaussian_model)
        r = inf.estimate_probability(gaussian_model, region, 10_000, np.random.default_rng(11))
        assert r.body_hits == 0

    def test_zero_probability_report(self, gaussian_model):
        r = inf.estimate_probability(gaussian_model, inf.marginal_above(0, 1e6, 2), 1000, np.random.default_rng(12))
        assert r.probability == 0 and r.return_period_years == np.inf and not r.resolved
        assert r.to_dict()["return_period_years"] is None


class TestQuantileSetExtremes:
    def test_isotropic_constant(self, truth):
        q_max, q_min = inf.quantile_set_extremes(truth)
        np.testing.assert_allclose(q_max, 3.0, rtol=1e-3)
        np.testing.assert_allclose(q_min, -3.0, rtol=1e-3)

    def test_monotone_in_probes(self, gaussian_model):
        rng = np.random.default_rng(13)
        small = uniform_sphere(100, 2, rng)
        big = np.vstack([small, uniform_sphere(1000, 2, rng)])
        a_max, a_min = inf.quantile_set_extremes(gaussian_model, small)
        b_max, b_min = inf.quantile_set_extremes(gaussian_model, big)
        assert np.all(b_max >= a_max) and np.all(b_min <= a_min)

    def test_grid_oracle(self, gaussian_model):
        t = 2 * np.pi * np.arange(10_000) / 10_000
        grid = np.column_stack([np.cos(t), np.sin(t)])
        g_max, g_min = inf.quantile_set_extremes(gaussian_model, grid)
        q_max, q_min = inf.quantile_set_extremes(gaussian_model)
        np.testing.assert_allclose(q_max, g_max, rtol=1e-2)
        np.testing.assert_allclose(q_min, g_min, rtol=1e-2)


class TestReturnLevels:
    def test_monotone(self, gaussian_model):
        levels = inf.marginal_return_level(gaussian_model, [1 / inf.BLOCKS_PER_YEAR_WEEKLY, 1, 10, 50],
                                           m_tail=200_000, rng=np.random.default_rng(14))
        assert np.all(np.isfinite(levels))
        assert np.all(np.diff(levels, axis=0) >= 0)
        lower = inf.marginal_return_level(gaussian_model, [1, 10, 50], "lower", m_tail=200_000,
                                          rng=np.random.default_rng(14))
        assert np.all(np.diff(lower, axis=0) <= 0)

    def test_gaussian_analytic(self, gaussian_model):
        level = inf.marginal_return_level(gaussian_model, 10, m_tail=2_000_000, rng=np.random.default_rng(15))
        target = stats.norm.ppf(1 - 1 / (10 * inf.BLOCKS_PER_YEAR_WEEKLY))
        np.testing.assert_allclose(level, target, atol=0.03)

    def test_resolution_error(self, gaussian_model):
        with pytest.raises(ResolutionError) as err:
            inf.marginal_return_level(gaussian_model, 1000, m_tail=1000, rng=np.random.default_rng(16))
        need = err.value.required_m_tail
        assert need == inf.required_m_tail(1 / (1000 * inf.BLOCKS_PER_YEAR_WEEKLY), 0.15)
        inf.marginal_return_level(gaussian_model, 1000, m_tail=need, rng=np.random.default_rng(16))

    def test_weighted_quantile_is_type7(self):
        v = np.random.default_rng(17).standard_normal(101)
        q = np.linspace(0, 1, 21)
        np.testing.assert_allclose(inf.weighted_quantile(v, np.ones_like(v), q), np.quantile(v, q), rtol=1e-12)


@pytest.fixture(scope="module")
def comonotone():
    return spar.spar_fit(synth_gaussian_copula(5000, 2, [[1, 1], [1, 1]], seed=3))


class TestJointAndSum:
    def test_comonotone(self, comonotone):
        r = inf.joint_tail_probability(comonotone, 10, m_tail=500_000, rng=np.random.default_rng(18))
        p = 1 / (10 * inf.BLOCKS_PER_YEAR_WEEKLY)
        assert abs(r.probability - p) < 0.1 * p

    def test_independent_d4_flags_resolution(self):
        m = spar.spar_fit(synth_gaussian_copula(5000, 4, seed=4))
        r = inf.joint_tail_probability(m, 10, m_tail=200_000, rng=np.random.default_rng(19))
        assert 0.0 <= r.probability < 1e-4
        assert not r.resolved

    def test_sum_lower_impossible(self, lognormal_model):
        r = inf.sum_tail_probability(lognormal_model, 0.0, "lower", 20_000, np.random.default_rng(20))
        assert r.probability == 0.0

    def test_sum_upper_monotone(self, lognormal_model):
        tail = inf.simulate_tail(lognormal_model, 50_000, np.random.default_rng(21))
        p = [inf.estimate_probability(lognormal_model, inf.sum_above(s), tail_sample=tail).probability
             for s in (2, 5, 10, 20, 40)]
        assert np.all(np.diff(p) <= 0)


class TestEventSet:
    def test_unconditioned(self, lognormal_model):
        ev = inf.generate_event_set(lognormal_model, 1000, rng=np.random.default_rng(22))
        assert ev.shape == (1000, 2) and np.all(ev > 0)
        assert lognormal_model.tail_mask(lognormal_model.to_centred(ev)).all()

    def test_joint_box(self, lognormal_model):
        levels = inf.marginal_return_level(lognormal_model, 1, m_tail=100_000, rng=np.random.default_rng(23))
        ev = inf.generate_event_set(lognormal_model, 200, inf.joint_above(levels), np.random.default_rng(24))
        assert np.all(ev > levels)

    def test_acceptance_rate_consistency(self, lognormal_model):
        q_max, _ = inf.quantile_set_extremes(lognormal_model)
        region = inf.marginal_above(0, q_max[0], 2, scale="centred")
        p = inf.estimate_probability(lognormal_model, region, 400_000, np.random.default_rng(25)).probability
        _, st = inf.generate_event_set(lognormal_model, 2000, region, np.random.default_rng(26), return_stats=True)
        rate = st["accepted"] / st["trials"]
        target = p / lognormal_model.alpha
        assert abs(rate - target) < 3 * np.sqrt(target * (1 - target) / st["trials"]) + 3e-3 * target

    def test_infeasible(self, lognormal_model):
        with pytest.raises(InfeasibleRegionError):
            inf.generate_event_set(lognormal_model, 10, inf.sum_above(1e12), np.random.default_rng(27),
                                   chunk=10_000, max_trials=50_000)


class TestRegion:
    def test_raw_scale_evaluation(self, lognormal_model):
        x = lognormal_model.to_centred(np.array([[2.0, 3.0], [5.0, 0.5]]))
        np.testing.assert_array_equal(inf.joint_above([1.0, 1.0]).contains(x, lognormal_model), [True, False])
        np.testing.assert_array_equal(inf.sum_above(5.2).contains(x, lognormal_model), [False, True])

    def test_describe(self):
        assert inf.marginal_above(1, 2.5, 3).describe() == "centred: x2 > 2.5"
        assert inf.sum_below(30).describe() == "sum(raw) < 30"
        assert inf.tail_region().complement().describe() == "not(tail)"
