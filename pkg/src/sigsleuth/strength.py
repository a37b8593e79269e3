"""Signal-strength estimation from a background-vs-experimental classifier.

The classifier score of each held-out experimental event is converted to
its background rank ``rho`` (the share of held-out background scores at or
above it).  Background events have uniform ``rho``; signal events pile up
near 0, so the density of ``rho`` at 1 is ``1 - lambda``.  That boundary
density is estimated with a log-linear Poisson regression on histogram
counts over ``(T, 1]`` whose slope is constrained to be non-positive.

The regression runs on the counts scale, ``E[H_t] = exp(b0 + b1 t)`` with
``t`` the right end of each bin, and the fitted count at ``t = 1`` is
divided by ``n * b`` afterwards to give a density.  Identifiability
requires regions with no signal (``inf p_s / p_b = 0``); this is assumed,
not checked.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import data as data_mod
from . import forest as forest_mod
from . import streams
from .errors import ConfigError, DataError, FitError

DEFAULT_THRESHOLD = 0.8
DEFAULT_BIN_WIDTH = 0.01
NEWTON_MAX_ITER = 100
NEWTON_TOL = 1e-8


@dataclass(frozen=True)
class RhoSample:
    values: np.ndarray
    reference_size: int


def np_quantile_transform(h_on_test_W, h_on_test_X):
    """``rho(W_i) = #{j : h(X_j) >= h(W_i)} / m`` for every experimental score."""
    h_w = np.asarray(h_on_test_W, dtype=float).ravel()
    h_x = np.asarray(h_on_test_X, dtype=float).ravel()
    if h_x.size == 0:
        raise DataError("reference (background) scores are empty")
    if h_w.size == 0:
        raise DataError("experimental scores are empty")
    xs = np.sort(h_x)
    at_or_above = h_x.size - np.searchsorted(xs, h_w, side="left")
    return RhoSample(at_or_above / h_x.size, h_x.size)


@dataclass(frozen=True)
class UniformityDiagnostic:
    distance: float
    p_value: float
    n: int
    effective_n: float
    passed: bool


def uniformity_check(rho, level=0.01):
    """Kolmogorov-Smirnov distance of ``rho`` to Uniform(0, 1).

    ``rho`` is built from a finite background reference of size ``m``,
    whose own sampling error enters the distance exactly as in a
    two-sample test, so the p-value uses the effective size
    ``n m / (n + m)``.  ``reference_size=None`` gives the plain one-sample
    test.
    """
    values = np.asarray(rho.values, dtype=float)
    n = values.size
    if n == 0:
        raise DataError("rho sample is empty")
    distance = float(sps.kstest(values, "uniform").statistic)
    m = rho.reference_size
    n_eff = n if not m else n * m / (n + m)
    p = float(sps.kstwo.sf(distance, max(1, int(round(n_eff)))))
    return UniformityDiagnostic(distance, p, n, n_eff, p > level)


@dataclass
class BoundaryFit:
    """Poisson fit of the rho histogram near 1."""

    threshold: float
    bin_width: float
    edges: np.ndarray
    counts: np.ndarray
    beta0: float
    beta1: float
    constrained: bool
    n: int
    covariance: np.ndarray
    iterations: int

    @property
    def g_hat_1(self):
        return math.exp(self.beta0 + self.beta1) / (self.n * self.bin_width)

    @property
    def lambda_hat(self):
        return 1.0 - self.g_hat_1

    def loglik(self, beta0=None, beta1=None):
        b0 = self.beta0 if beta0 is None else beta0
        b1 = self.beta1 if beta1 is None else beta1
        return poisson_loglik(self.counts, self.edges[1:], b0, b1)

    def glm_interval(self, alpha=0.05):
        """Delta-method interval for lambda from the linear predictor at t = 1."""
        grad = np.array([1.0, 0.0 if self.constrained else 1.0])
        se = math.sqrt(max(float(grad @ self.covariance @ grad), 0.0))
        z = sps.norm.ppf(1 - alpha / 2)
        eta = self.beta0 + self.beta1
        scale = self.n * self.bin_width
        g_lo, g_hi = math.exp(eta - z * se) / scale, math.exp(eta + z * se) / scale
        return (1.0 - g_hi, 1.0 - g_lo)

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "bin_width": self.bin_width,
            "bin_right_edges": self.edges[1:].tolist(),
            "counts": self.counts.tolist(),
            "beta0": self.beta0,
            "beta1": self.beta1,
            "constrained": self.constrained,
            "n": self.n,
            "g_hat_1": self.g_hat_1,
            "lambda_hat": self.lambda_hat,
            "iterations": self.iterations,
        }


def poisson_loglik(counts, t, beta0, beta1):
    """Poisson log-likelihood without the ``log H!`` constant."""
    eta = beta0 + beta1 * np.asarray(t, dtype=float)
    return float(np.sum(counts * eta - np.exp(eta)))


def histogram_edges(T, b):
    """Edges ``T, T + b, ..., 1`` of bins tiling ``(T, 1]``."""
    if not 0 < T < 1 or not b > 0:
        raise ConfigError(f"need 0 < T < 1 and b > 0, got T={T}, b={b}")
    k = (1 - T) / b
    n_bins = int(round(k))
    if n_bins < 1 or abs(k - n_bins) > 1e-9:
        raise ConfigError(f"bins of width {b} do not tile [{T}, 1]")
    edges = np.round(T + b * np.arange(n_bins + 1), 12)
    edges[-1] = 1.0
    return edges


def rho_histogram(values, edges):
    """Counts in the right-closed bins ``(edges[k-1], edges[k]]``."""
    values = np.asarray(values, dtype=float)
    inside = values[(values > edges[0]) & (values <= edges[-1])]
    idx = np.searchsorted(edges, inside, side="left")
    return np.bincount(idx - 1, minlength=edges.size - 1).astype(float)


def _newton_poisson(counts, t):
    x = np.column_stack([np.ones_like(t), t])
    beta = np.array([math.log(counts.mean()), 0.0])
    ll = poisson_loglik(counts, t, *beta)
    for it in range(1, NEWTON_MAX_ITER + 1):
        mu = np.exp(x @ beta)
        grad = x.T @ (counts - mu)
        info = x.T @ (mu[:, None] * x)
        step = np.linalg.solve(info, grad)
        scale = 1.0
        while True:
            cand = beta + scale * step
            cand_ll = poisson_loglik(counts, t, *cand)
            if cand_ll >= ll - 1e-12 or scale < 1e-10:
                break
            scale /= 2
        done = np.max(np.abs(cand - beta)) < NEWTON_TOL * (1 + np.max(np.abs(beta)))
        beta, ll = cand, cand_ll
        if done:
            mu = np.exp(x @ beta)
            cov = np.linalg.inv(x.T @ (mu[:, None] * x))
            return beta, cov, it
    raise FitError(f"Poisson regression did not converge in {NEWTON_MAX_ITER} iterations")


def fit_boundary(rho, T=DEFAULT_THRESHOLD, b=DEFAULT_BIN_WIDTH):
    """Estimate the density of ``rho`` at 1 by constrained Poisson regression."""
    values = rho.values if isinstance(rho, RhoSample) else np.asarray(rho, dtype=float)
    if values.size == 0:
        raise DataError("rho sample is empty")
    edges = histogram_edges(T, b)
    counts = rho_histogram(values, edges)
    if counts.sum() == 0:
        raise FitError(f"no rho values above the threshold {T}")
    t = edges[1:]
    constrained = False
    if counts.size == 1:
        beta, it, constrained = np.array([math.log(counts[0]), 0.0]), 0, True
    else:
        beta, cov, it = _newton_poisson(counts, t)
        if beta[1] > 0:
            beta, constrained = np.array([math.log(counts.mean()), 0.0]), True
    if constrained:
        cov = np.array([[1.0 / counts.sum(), 0.0], [0.0, 0.0]])
    return BoundaryFit(float(T), float(b), edges, counts, float(beta[0]), float(beta[1]),
                       constrained, int(values.size), cov, it)


@dataclass
class StrengthEstimate:
    lambda_hat: float
    lambda_raw: float
    intervals: dict
    bootstrap_draws: np.ndarray
    settings: dict
    fit: BoundaryFit
    uniformity: UniformityDiagnostic = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        doc = {
            "lambda_hat": self.lambda_hat,
            "lambda_raw": self.lambda_raw,
            "intervals": {k: list(v) for k, v in self.intervals.items()},
            "bootstrap_draws": self.bootstrap_draws.tolist(),
            "settings": self.settings,
            "fit": self.fit.to_dict(),
        }
        doc.update(self.extra)
        return doc

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _split_scores(X, W, cfg, ib1, ib2, ie1, ie2, workers):
    f = forest_mod.fit(X.take(ib1), W.take(ie1), cfg, workers=workers)
    return f.predict_proba(X.take(ib2)), f.predict_proba(W.take(ie2))


def _boundary_from_scores(h_x, h_w, T, b):
    return fit_boundary(np_quantile_transform(h_w, h_x), T, b)


def estimate_lambda(X, W, cfg=None, split=None, T=DEFAULT_THRESHOLD, b=DEFAULT_BIN_WIDTH,
                    alpha=0.05, workers=None):
    """Out-of-sample point estimate of the signal strength with its GLM interval."""
    cfg = cfg or forest_mod.ForestConfig()
    split = split or data_mod.SplitSpec.halves(X.n, W.n)
    histogram_edges(T, b)
    ib1, ib2, ie1, ie2 = data_mod.split_indices(X.n, W.n, split)
    h_x, h_w = _split_scores(X, W, cfg, ib1, ib2, ie1, ie2, workers)
    fit = _boundary_from_scores(h_x, h_w, T, b)
    raw = fit.lambda_hat
    settings = {"T": T, "b": b, "split": list(split.sizes), "seed": split.seed, "forest_seed": cfg.seed}
    return StrengthEstimate(
        lambda_hat=float(min(max(raw, 0.0), 1.0)),
        lambda_raw=float(raw),
        intervals={"glm": fit.glm_interval(alpha)},
        bootstrap_draws=np.empty(0),
        settings=settings,
        fit=fit,
    )


def min_bootstrap_cycles(alpha):
    return max(2, math.ceil(2 / alpha))


def bootstrap_intervals(estimate, draws, alpha):
    """Basic, percentile and normal-SE intervals from bootstrap draws."""
    draws = np.asarray(draws, dtype=float)
    lo = float(np.quantile(draws, alpha / 2, method="inverted_cdf"))
    hi = float(np.quantile(draws, 1 - alpha / 2, method="inverted_cdf"))
    z = float(sps.norm.ppf(1 - alpha / 2))
    se = float(np.std(draws, ddof=1))
    return {
        "basic": (2 * estimate - hi, 2 * estimate - lo),
        "percentile": (lo, hi),
        "normal_se": (estimate - z * se, estimate + z * se),
    }


def _bootstrap_draw(X, W, cfg, split, T, b, seed, k):
    gen = streams.rng(seed, "bootstrap", k)
    idx = data_mod.bootstrap_split_indices(X.n, W.n, split, gen)
    cycle_cfg = cfg.with_(seed=streams.int_seed(seed, "bootstrap-forest", k))
    h_x, h_w = _split_scores(X, W, cycle_cfg, *idx, workers=1)
    return _boundary_from_scores(h_x, h_w, T, b).lambda_hat


def bootstrap_lambda(X, W, cfg=None, split=None, T=DEFAULT_THRESHOLD, b=DEFAULT_BIN_WIDTH,
                     B=100, alpha=0.05, seed=0, workers=None):
    """Point estimate plus bootstrap intervals from ``B`` re-trained resamples.

    Intervals are built from the unclipped estimates.  Each cycle keeps the
    training and test resamples disjoint in original rows.
    """
    if B < min_bootstrap_cycles(alpha):
        raise ConfigError(
            f"B={B} is too small for {1 - alpha:.0%} intervals; need at least {min_bootstrap_cycles(alpha)}"
        )
    est = estimate_lambda(X, W, cfg, split, T, b, alpha, workers)
    cfg = cfg or forest_mod.ForestConfig()
    split = split or data_mod.SplitSpec.halves(X.n, W.n)
    draws = np.array(
        streams.parallel_map(lambda k: _bootstrap_draw(X, W, cfg, split, T, b, seed, k), range(B), workers)
    )
    est.intervals.update(bootstrap_intervals(est.lambda_raw, draws, alpha))
    est.bootstrap_draws = draws
    est.settings.update({"B": B, "alpha": alpha, "bootstrap_seed": seed})
    return est
