import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from sigsleuth.data import EventTable, SplitSpec
from sigsleuth.errors import ConfigError, DataError, FitError
from sigsleuth.forest import ForestConfig
from sigsleuth.strength import (
    RhoSample,
    bootstrap_intervals,
    bootstrap_lambda,
    estimate_lambda,
    fit_boundary,
    histogram_edges,
    np_quantile_transform,
    poisson_loglik,
    rho_histogram,
    uniformity_check,
)

FOREST = ForestConfig(n_trees=20, min_leaf=20)


def double_loop_rho(h_w, h_x):
    return np.array([sum(x >= w for x in h_x) / len(h_x) for w in h_w])


def gaussian_tables(m, n, lam, seed, shift=3.0, d=3):
    g = np.random.default_rng(seed)
    x = g.normal(size=(m, d))
    k = g.binomial(n, lam)
    w = np.vstack([g.normal(size=(n - k, d)), g.normal(shift, 0.7, size=(k, d))])
    names = tuple(f"x{j}" for j in range(d))
    return EventTable(x, names), EventTable(w, names)


class TestQuantileTransform:
    def test_top_of_ranking(self):
        assert np_quantile_transform([0.9], [0.1, 0.5]).values[0] == 0

    def test_bottom_of_ranking(self):
        assert np_quantile_transform([0.0], [0.1, 0.5]).values[0] == 1

    def test_hand_count(self):
        assert np_quantile_transform([0.5], [0.2, 0.4, 0.6]).values[0] == pytest.approx(1 / 3)

    def test_ties_count_as_at_or_above(self):
        assert np_quantile_transform([0.4], [0.4, 0.4, 0.1]).values[0] == pytest.approx(2 / 3)

    def test_empty(self):
        with pytest.raises(DataError):
            np_quantile_transform([0.3], [])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 9), min_size=1, max_size=200), st.lists(st.integers(0, 9), min_size=1, max_size=200))
    def test_equals_double_loop(self, w, x):
        h_w, h_x = np.array(w) / 9, np.array(x) / 9
        np.testing.assert_array_equal(np_quantile_transform(h_w, h_x).values, double_loop_rho(h_w, h_x))

    @given(st.lists(st.integers(0, 50), min_size=1, max_size=60), st.lists(st.integers(0, 50), min_size=1, max_size=60))
    def test_monotone_invariance(self, w, x):
        h_w, h_x = np.array(w) / 50, np.array(x) / 50
        a = np_quantile_transform(h_w, h_x).values
        b = np_quantile_transform(np.exp(3 * h_w), np.exp(3 * h_x)).values
        np.testing.assert_array_equal(a, b)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.lists(st.floats(0, 1), min_size=1, max_size=30))
    def test_on_reference_lattice(self, w, x):
        rho = np_quantile_transform(w, x)
        k = rho.values * rho.reference_size
        np.testing.assert_allclose(k, np.round(k), atol=1e-9)


class TestUniformity:
    def test_grid(self):
        n = 500
        diag = uniformity_check(RhoSample(np.arange(1, n + 1) / n, None))
        assert diag.distance <= 1 / n + 1e-12
        assert diag.passed

    def test_all_equal_fails(self):
        diag = uniformity_check(RhoSample(np.ones(300), 300))
        assert diag.distance == pytest.approx(1.0)
        assert not diag.passed

    def test_effective_size(self):
        diag = uniformity_check(RhoSample(np.linspace(0, 1, 100), 300))
        assert diag.effective_n == pytest.approx(100 * 300 / 400)


class TestBoundary:
    def test_edges_tile(self):
        e = histogram_edges(0.8, 0.01)
        assert e.size == 21 and e[0] == 0.8 and e[-1] == 1.0

    def test_bad_tiling(self):
        with pytest.raises(ConfigError):
            histogram_edges(0.8, 0.03)

    def test_histogram_right_closed(self):
        e = histogram_edges(0.8, 0.1)
        counts = rho_histogram([0.8, 0.85, 0.9, 0.95, 1.0], e)
        assert counts.tolist() == [2.0, 2.0]

    def test_uniform_gives_zero(self):
        n = 200_000
        fit = fit_boundary(RhoSample((np.arange(n) + 0.5) / n, n), 0.8, 0.01)
        assert fit.g_hat_1 == pytest.approx(1.0, abs=0.01)
        assert fit.lambda_hat == pytest.approx(0.0, abs=0.01)

    def test_constant_counts_closed_form(self):
        # 10 values inside each of 20 bins, 1000 values overall
        e = histogram_edges(0.8, 0.01)
        mids = (e[:-1] + e[1:]) / 2
        inside = np.repeat(mids, 10)
        values = np.concatenate([inside, np.full(1000 - inside.size, 0.3)])
        fit = fit_boundary(RhoSample(values, 1000), 0.8, 0.01)
        assert fit.beta1 == pytest.approx(0.0, abs=1e-8)
        assert fit.beta0 == pytest.approx(math.log(10.0), abs=1e-8)
        assert fit.g_hat_1 == pytest.approx(10 / (1000 * 0.01), rel=1e-8)

    def test_matches_grid_and_optimizer(self, gen):
        rho = np.concatenate([gen.uniform(0, 1, 3000), 1 - gen.beta(1, 4, 600) * 0.3])
        fit = fit_boundary(RhoSample(np.clip(rho, 0, 1), 3000), 0.8, 0.01)
        t = fit.edges[1:]
        b0s = np.linspace(fit.beta0 - 0.5, fit.beta0 + 0.5, 401)
        b1s = np.linspace(min(fit.beta1 - 2, -2), 0.0, 401)
        grid = max(poisson_loglik(fit.counts, t, a, b) for a in b0s[::4] for b in b1s[::4])
        assert fit.loglik() >= grid - 1e-6
        res = optimize.minimize(
            lambda p: -poisson_loglik(fit.counts, t, p[0], p[1]),
            x0=[0.0, 0.0],
            bounds=[(-20, 20), (-50, 0)],
            method="L-BFGS-B",
            options={"ftol": 1e-14, "gtol": 1e-10},
        )
        assert fit.loglik() >= -res.fun - 1e-6

    def test_positive_slope_is_constrained(self, gen):
        # density rising towards 1 would give beta1 > 0
        rho = np.concatenate([gen.uniform(0, 1, 2000), gen.uniform(0.95, 1.0, 400)])
        fit = fit_boundary(RhoSample(rho, 2000), 0.8, 0.01)
        assert fit.constrained and fit.beta1 == 0
        assert fit.beta0 == pytest.approx(math.log(fit.counts.mean()))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.5, 3.0))
    def test_slope_never_positive(self, seed, a):
        g = np.random.default_rng(seed)
        fit = fit_boundary(RhoSample(g.beta(a, 1.0, 2000), 2000), 0.8, 0.02)
        assert fit.beta1 <= 0 and fit.g_hat_1 >= 0

    def test_empty_tail(self):
        with pytest.raises(FitError):
            fit_boundary(RhoSample(np.full(50, 0.1), 50), 0.8, 0.01)

    def test_glm_interval_contains_estimate(self, gen):
        fit = fit_boundary(RhoSample(gen.uniform(size=5000), 5000), 0.8, 0.01)
        lo, hi = fit.glm_interval(0.05)
        assert lo <= fit.lambda_hat <= hi


class TestBootstrapIntervals:
    def test_degenerate(self):
        iv = bootstrap_intervals(0.3, np.full(50, 0.3), 0.05)
        for lo, hi in iv.values():
            assert lo == pytest.approx(0.3) and hi == pytest.approx(0.3)

    def test_percentile_are_order_statistics(self, gen):
        draws = gen.normal(size=200)
        lo, hi = bootstrap_intervals(0.0, draws, 0.1)["percentile"]
        s = np.sort(draws)
        assert lo in s and hi in s
        assert lo == s[math.ceil(0.05 * 200) - 1]
        assert hi == s[math.ceil(0.95 * 200) - 1]

    def test_basic_reflects(self, gen):
        draws = gen.normal(1.0, 0.1, size=100)
        iv = bootstrap_intervals(1.0, draws, 0.05)
        assert iv["basic"][0] == pytest.approx(2 - iv["percentile"][1])
        assert iv["basic"][1] == pytest.approx(2 - iv["percentile"][0])

    def test_too_few_cycles(self):
        X, W = gaussian_tables(100, 100, 0.0, 0)
        with pytest.raises(ConfigError):
            bootstrap_lambda(X, W, FOREST, B=10, alpha=0.05)


class TestEstimate:
    def test_null_estimate_near_zero(self):
        X, W = gaussian_tables(22_000, 22_000, 0.0, 7)
        est = estimate_lambda(X, W, FOREST, SplitSpec(2000, 20_000, 2000, 20_000, seed=1))
        assert abs(est.lambda_raw) <= 0.05
        assert 0 <= est.lambda_hat <= 1

    def test_deterministic_and_json(self):
        X, W = gaussian_tables(600, 600, 0.3, 2)
        split = SplitSpec.halves(600, 600, seed=4)
        a = estimate_lambda(X, W, FOREST, split, T=0.5, b=0.05)
        b = estimate_lambda(X, W, FOREST, split, T=0.5, b=0.05)
        assert a.to_json() == b.to_json()
        doc = json.loads(a.to_json())
        assert doc["fit"]["counts"] and "glm" in doc["intervals"]

    def test_dilution_is_soft_monotone(self):
        lo = estimate_lambda(*gaussian_tables(4000, 4000, 0.1, 5), FOREST, SplitSpec.halves(4000, 4000, seed=2), T=0.5, b=0.05)
        hi = estimate_lambda(*gaussian_tables(4000, 4000, 0.4, 5), FOREST, SplitSpec.halves(4000, 4000, seed=2), T=0.5, b=0.05)
        assert lo.lambda_hat <= hi.lambda_hat + 0.05

    def test_bootstrap_intervals_ordered(self):
        X, W = gaussian_tables(600, 600, 0.3, 3)
        est = bootstrap_lambda(X, W, ForestConfig(n_trees=5, min_leaf=10), SplitSpec.halves(600, 600), T=0.5, b=0.05, B=40, seed=1)
        assert est.bootstrap_draws.size == 40
        for key in ("basic", "percentile", "normal_se", "glm"):
            lo, hi = est.intervals[key]
            assert lo <= hi

    def test_bootstrap_worker_invariance(self):
        X, W = gaussian_tables(400, 400, 0.3, 3)
        cfg = ForestConfig(n_trees=3, min_leaf=10)
        a = bootstrap_lambda(X, W, cfg, T=0.5, b=0.05, B=40, seed=1, workers=1)
        b = bootstrap_lambda(X, W, cfg, T=0.5, b=0.05, B=40, seed=1, workers=3)
        np.testing.assert_array_equal(a.bootstrap_draws, b.bootstrap_draws)
