"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Slow criteria (5 and 9) run with ``pytest -m slow``. Criterion 11 needs the
published discharge series; point ``DEEPSPAR_DATASET`` at a series CSV in
the documented schema to enable it.
"""

import os
import time

import numpy as np
import pytest
from oracles import circle_angles, gpd_radial_sample, grafted_tail_sample
from scipy import integrate, stats

from deepspar import bootstrap as bs
from deepspar import dataio, diagnostics, gpd
from deepspar import inference as inf
from deepspar import spar
from deepspar.neural import mlp_backward, mlp_forward, mlp_init

RAYLEIGH_Q85 = np.sqrt(-2.0 * np.log(0.15))


def elapsed(t0):
    return time.perf_counter() - t0


class TestCriterion01GpdExactness:
    def test_round_trip_and_density(self, record_criterion):
        t0 = time.perf_counter()
        sigmas = [0.3, 1.0, 2.0, 7.5]
        xis = [-0.4, -0.2, -1e-3, -1e-7, 0.0, 1e-7, 1e-3, 0.1, 0.25, 0.45]
        q = np.linspace(0.0, 0.999, 200)
        worst_rt, worst_int = 0.0, 0.0
        for s in sigmas:
            for xi in xis:
                y = gpd.gpd_quantile(q, s, xi)
                back = gpd.gpd_quantile(gpd.gpd_cdf(y, s, xi), s, xi)
                worst_rt = max(worst_rt, np.max(np.abs(back - y) / np.maximum(y, 1e-300)))
                for yy in y[::20][1:]:
                    val, _ = integrate.quad(gpd.gpd_pdf, 0.0, yy, args=(s, xi), epsabs=1e-13, epsrel=1e-12)
                    worst_int = max(worst_int, abs(val - gpd.gpd_cdf(yy, s, xi)))
        t = elapsed(t0)
        ok = worst_rt < 1e-9 and worst_int < 1e-6 and t < 10
        record_criterion("01 gpd exactness", ok,
                         f"round-trip rel {worst_rt:.2e} (<1e-9), integral {worst_int:.2e} (<1e-6), {t:.1f}s")
        assert ok


def _fd_check(p, loss_of_theta, grad, n_probes, rng, h=1e-6):
    """Worst relative mismatch between ``grad`` and central differences."""
    worst = 0.0
    for i in rng.choice(p.theta.size, size=n_probes, replace=False):
        tp, tm = p.theta.copy(), p.theta.copy()
        tp[i] += h
        tm[i] -= h
        fd = (loss_of_theta(tp) - loss_of_theta(tm)) / (2 * h)
        if not (np.isfinite(fd) and np.isfinite(grad[i])):
            return np.inf
        worst = max(worst, abs(grad[i] - fd) / max(abs(fd), 1e-3))
    return worst


class TestCriterion02Gradients:
    def test_finite_differences(self, record_criterion):
        t0 = time.perf_counter()
        rng = np.random.default_rng(2)
        w = circle_angles(400)
        results = {}

        thr = mlp_init(2, (16, 16), ("exponential",), seed=1, output_scale=1.0)
        u = mlp_forward(thr, w)[:, 0]
        # residuals at least 0.05 from the kink, far beyond any probe-induced shift
        r = u + rng.choice([-1.0, 1.0], u.size) * rng.uniform(0.05, 1.0, u.size)

        def tilted_total(theta):
            return spar.tilted_loss(r, mlp_forward(thr.with_theta(theta), w)[:, 0], 0.15)[0].mean()

        _, g_out = spar.tilted_loss(r, u, 0.15)
        g = mlp_backward(thr, w, g_out[:, None] / u.size)
        results["tilted"] = _fd_check(thr, tilted_total, g, 300, rng)

        e = rng.exponential(size=400)
        for reparam in ("orthogonal", "direct"):
            net = mlp_init(2, (16, 16), ("exponential", "scaled_arctan"), seed=3, output_scale=1.0)
            out = mlp_forward(net, w)
            sigma, xi = spar.outputs_to_gpd(out, reparam)
            assert np.any(xi < 0) and np.any(xi > 0)
            # keep every excess well inside the support so probes stay finite
            y = np.where(xi < 0, np.minimum(e, 0.5 * sigma / np.abs(xi)), e)

            def nll_total(theta, net=net, reparam=reparam):
                return spar.gpd_nll(y, mlp_forward(net.with_theta(theta), w), reparam)[0].mean()

            _, g_out = spar.gpd_nll(y, out, reparam)
            g = mlp_backward(net, w, g_out / y.size)
            results[reparam] = _fd_check(net, nll_total, g, 300, rng)
        t = elapsed(t0)
        worst = max(results.values())
        ok = worst < 1e-5 and t < 30
        detail = ", ".join(f"{k} {v:.1e}" for k, v in results.items())
        record_criterion("02 gradient correctness", ok, f"900 probes, worst rel {detail} (<1e-5), {t:.1f}s")
        assert ok


class TestCriterion03ThresholdCalibration:
    def test_rayleigh_quantile(self, gaussian_sample, record_criterion):
        t0 = time.perf_counter()
        model = spar.fit_centred(gaussian_sample, spar.SparConfig(seed=0))
        t = elapsed(t0)
        u = model.threshold(circle_angles(360))
        rel = np.max(np.abs(u / RAYLEIGH_Q85 - 1))
        frac = model.metadata["exceedance_fraction"]
        ok = rel <= 0.05 and abs(frac - 0.15) <= 0.02 and t < 300
        record_criterion("03 threshold calibration", ok,
                         f"max |u/1.9479-1| {rel:.3f} (<=0.05), exceedance fraction {frac:.4f}, {t:.1f}s")
        assert ok


class TestCriterion04GpdRecovery:
    def test_constant_tail(self, record_criterion):
        t0 = time.perf_counter()
        x = grafted_tail_sample(50_000, 2, 3.0, 2.0, 0.2, 0.15, np.random.default_rng(404))
        model = spar.fit_centred(x, spar.SparConfig(seed=0))
        t = elapsed(t0)
        sigma, xi = model.gpd_params(circle_angles(360))
        r = np.linalg.norm(x, axis=1)
        u = model.threshold(x / r[:, None])
        exc = r > u
        s_mle, xi_mle = gpd.fit_constant(r[exc] - u[exc])
        ds, dx = np.max(np.abs(sigma - 2.0)), np.max(np.abs(xi - 0.2))
        ok = ds <= 0.15 and dx <= 0.08 and abs(s_mle - 2.0) <= 0.15 and abs(xi_mle - 0.2) <= 0.08 and t < 300
        record_criterion(
            "04 gpd regression recovery", ok,
            f"max|sigma-2| {ds:.3f}, max|xi-0.2| {dx:.3f}; scalar MLE ({s_mle:.3f}, {xi_mle:.3f}) "
            f"vs net range sigma [{sigma.min():.3f}, {sigma.max():.3f}], {t:.1f}s")
        assert ok


@pytest.mark.slow
class TestCriterion05RoundTrip:
    def test_refit_within_bootstrap_ci(self, lognormal_model, record_criterion):
        t0 = time.perf_counter()
        sim = lognormal_model.to_raw(inf.simulate(lognormal_model, 50_000, np.random.default_rng(55)))
        cfg = spar.SparConfig(seed=505)
        refit = spar.spar_fit(sim, cfg)

        def level(model, b):
            return inf.marginal_return_level(model, 10, m_tail=200_000, rng=np.random.default_rng(10_000 + b))

        base = level(lognormal_model, -1)
        again = level(refit, -2)
        ens = bs.bootstrap_fit(sim, cfg, B=50, master_seed=5050)
        reps = np.array([level(m, b) for b, m in enumerate(ens.models)])
        cis = [bs.percentile_ci(reps[:, j]) for j in range(reps.shape[1])]
        t = elapsed(t0)
        inside = [lo <= b <= hi for b, (lo, hi) in zip(base, cis)]
        ok = all(inside) and t < 1800
        detail = "; ".join(f"x{j + 1}: original {b:.3f} refit {a:.3f} CI ({lo:.3f}, {hi:.3f})"
                           for j, (b, a, (lo, hi)) in enumerate(zip(base, again, cis)))
        record_criterion("05 round-trip consistency", ok, f"{detail}; {t:.0f}s")
        assert ok


def sum_tail_oracle(model, s):
    """Exact P(x1 + x2 > s) on the centred scale under a fitted d=2 model.

    The body term enumerates the stored body points. For each stored
    exceedance angle the radial tail probability has a closed form, since
    the region along a ray with positive direction sum starts at
    ``r* = s / (w1 + w2)``.
    """
    body = np.mean(model.body_points.sum(axis=1) > s)
    w = model.exceedance_angles
    u = model.threshold(w)
    sigma, xi = model.gpd_params(w)
    a = w.sum(axis=1)
    p = np.zeros(len(w))
    pos = a > 0
    y = s / a[pos] - u[pos]
    p[pos] = np.where(y <= 0, 1.0, 1.0 - gpd.gpd_cdf(np.maximum(y, 0.0), sigma[pos], xi[pos]))
    return (1 - model.alpha) * body + model.alpha * p.mean(), (w, u, sigma, xi)


class TestCriterion06ProbabilityOracles:
    def test_tail_region_is_alpha(self, gaussian_model, record_criterion):
        r = inf.estimate_probability(gaussian_model, inf.tail_region(), 2_000_000, np.random.default_rng(60))
        ok = r.probability == gaussian_model.alpha
        record_criterion("06a P(tail region) = alpha", ok, f"{r.probability!r} vs {gaussian_model.alpha!r}")
        assert ok

    def test_gaussian_half_space(self, gaussian_model, record_criterion):
        t0 = time.perf_counter()
        h = stats.norm.ppf(0.999)
        r = inf.estimate_probability(gaussian_model, inf.marginal_above(0, h, 2, scale="centred"), 2_000_000,
                                     np.random.default_rng(61))
        z = (r.probability - 0.001) / r.standard_error
        ok = abs(z) <= 3 and elapsed(t0) < 600
        record_criterion("06b gaussian half-space vs 0.001", ok,
                         f"P {r.probability:.6f}, MC SE {r.standard_error:.1e}, z {z:+.1f} (|z|<=3)")
        assert ok

    def test_sum_tail_quadrature(self, gaussian_model, record_criterion):
        t0 = time.perf_counter()
        s = np.sqrt(2) * stats.norm.ppf(0.99)
        oracle, (w, u, sigma, xi) = sum_tail_oracle(gaussian_model, s)
        # the closed form per angle agrees with direct quadrature of the density
        a = w.sum(axis=1)
        idx = np.flatnonzero((a > 0) & (s / np.where(a > 0, a, 1.0) > u))[:25]
        for k in idx:
            y0 = s / w[k].sum() - u[k]
            val, _ = integrate.quad(gpd.gpd_pdf, y0, np.inf, args=(sigma[k], xi[k]), epsabs=1e-12)
            assert val == pytest.approx(1 - gpd.gpd_cdf(y0, sigma[k], xi[k]), abs=1e-8)
        r = inf.estimate_probability(gaussian_model, inf.sum_above(s, scale="centred"), 2_000_000,
                                     np.random.default_rng(62))
        z = (r.probability - oracle) / r.standard_error
        ok = abs(z) <= 3 and elapsed(t0) < 600
        record_criterion("06c d=2 sum tail vs quadrature", ok,
                         f"P {r.probability:.6f} oracle {oracle:.6f}, z {z:+.2f}; "
                         f"gaussian truth {0.01:.4f} (information only)")
        assert ok


class TestCriterion07Chi:
    def test_chi_oracles(self, record_criterion):
        t0 = time.perf_counter()
        rng = np.random.default_rng(70)
        x = rng.standard_normal(100_000)
        como = diagnostics.chi_curve(x, x).chi
        a, b = rng.random(100_000), rng.random(100_000)
        ind = diagnostics.chi_curve(a, b)
        keep = ind.u_grid <= 0.95
        dev = np.max(np.abs(ind.chi[keep] - (1 - ind.u_grid[keep])))
        z = rng.multivariate_normal([0, 0], [[1, 0.7], [0.7, 1]], 20_000)
        base = diagnostics.chi_curve(z[:, 0], z[:, 1]).chi
        moved = diagnostics.chi_curve(np.exp(z[:, 0]), np.arctan(z[:, 1]) * 5 + 2).chi
        t = elapsed(t0)
        ok = np.all(como == 1) and dev <= 0.02 and np.array_equal(base, moved) and t < 60
        record_criterion("07 chi oracles", ok,
                         f"comonotone min {como.min()}, independent max dev {dev:.4f} (<=0.02), "
                         f"invariance exact {np.array_equal(base, moved)}, {t:.1f}s")
        assert ok


class TestCriterion08QqSelfConsistency:
    def test_held_out_ks(self, record_criterion):
        t0 = time.perf_counter()
        passes = 0
        for trial in range(100):
            rng = np.random.default_rng(8000 + trial)
            x = gpd_radial_sample(50_000, 2, lambda w: 1.0 + 0.3 * w[:, 0], 0.1, rng)
            train, held = x[:45_000], x[45_000:]
            model = spar.fit_centred(train, spar.SparConfig(seed=trial))
            passes += diagnostics.gpd_ks_pvalue(model, held) > 0.01
        t = elapsed(t0)
        ok = passes >= 95 and t < 1200
        record_criterion("08 held-out gpd qq ks", ok, f"{passes}/100 trials with p > 0.01 (>=95), {t:.0f}s")
        assert ok


@pytest.mark.slow
class TestCriterion09BootstrapCoverage:
    def test_coverage(self, record_criterion):
        t0 = time.perf_counter()
        truth = np.exp(stats.norm.ppf(0.99))
        covered = 0
        for trial in range(100):
            obs = dataio.synth_gaussian_copula(5000, 2, [[1.0, 0.5], [0.5, 1.0]], seed=9000 + trial)
            ens = bs.bootstrap_fit(obs, spar.SparConfig(), B=50, master_seed=trial)
            q = [inf.marginal_return_level(m, 100, blocks_per_year=1.0, m_tail=20_000,
                                           rng=np.random.default_rng(b))[0] for b, m in enumerate(ens.models)]
            lo, hi = bs.percentile_ci(q)
            covered += lo <= truth <= hi
        t = elapsed(t0)
        ok = covered >= 85 and t < 7200
        record_criterion("09 bootstrap coverage", ok, f"{covered}/100 intervals cover {truth:.4f} (>=85), {t:.0f}s")
        assert ok


class TestCriterion10Performance:
    def test_fit_times(self, record_criterion):
        corr = np.full((4, 4), 0.5) + 0.5 * np.eye(4)
        times = {}
        for n in (10_000, 78_250):
            obs = dataio.synth_gaussian_copula(n, 4, corr, seed=100)
            t0 = time.perf_counter()
            spar.spar_fit(obs, spar.SparConfig(seed=0))
            times[n] = elapsed(t0)
        ok = times[10_000] < 300 and times[78_250] < 3600
        record_criterion("10 performance envelope", ok,
                         f"n=10000 d=4 {times[10_000]:.1f}s (<300), n=78250 d=4 {times[78_250]:.1f}s (<3600), "
                         f"{os.cpu_count()} cpu")
        assert ok


DATASET = os.environ.get("DEEPSPAR_DATASET")


class TestCriterion11PublishedData:
    @pytest.mark.skipif(not DATASET, reason="DEEPSPAR_DATASET is not set")
    def test_window_trends(self, record_criterion):
        series = dataio.read_series_csv(DATASET)
        probs = {"sum_lower": [], "joint_lower": [], "joint_upper": []}
        for k, window in enumerate(dataio.DEFAULT_WINDOWS):
            obs = dataio.weekly_maxima(series, window)
            model = spar.spar_fit(obs, spar.SparConfig(seed=k))
            rng = np.random.default_rng(1100 + k)
            probs["sum_lower"].append(inf.sum_tail_probability(model, 30.0, "lower", 2_000_000, rng).probability)
            probs["joint_lower"].append(inf.joint_tail_probability(model, 10, "lower", m_tail=2_000_000,
                                                                   rng=rng).probability)
            probs["joint_upper"].append(inf.joint_tail_probability(model, 10, "upper", m_tail=2_000_000,
                                                                   rng=rng).probability)
        rising = all(np.all(np.diff(probs[k]) > 0) for k in ("sum_lower", "joint_lower"))
        rp = 1 / (np.array(probs["sum_lower"]) * inf.BLOCKS_PER_YEAR_WEEKLY)
        drop = rp[0] >= 100 and rp[-1] <= 10
        up = np.array(probs["joint_upper"])
        no_trend = not (np.all(np.diff(up) > 0) or np.all(np.diff(up) < 0))
        ok = rising and drop and no_trend
        record_criterion("11 published data trends", ok,
                         f"sum_lower return periods {np.round(rp, 1).tolist()}, joint_upper {up.tolist()}")
        assert ok
