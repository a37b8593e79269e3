"""Null distributions and p-values for the classifier tests.

Four calibrations are offered:

* ``bootstrap`` / ``permutation`` keep a classifier trained on held-out
  training halves fixed and resample the pooled test halves;
* ``slow_permutation`` re-trains the classifier on label-shuffled pooled
  data every cycle and uses in-sample statistics;
* ``asymptotic`` uses Normal approximations conditional on the classifier.

Resampling cycle ``k`` always draws from the stream ``(seed, k)``, so the
null sample does not depend on the worker count.
"""
import enum
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import data as data_mod
from . import forest as forest_mod
from . import streams
from .errors import ConfigError, InconclusiveTestError
from .teststats import (
    EPS,
    SIGNAL_OVER_BACKGROUND,
    Statistic,
    StatValue,
    compute_md,
    compute_mi,
    density_ratio,
    logit,
)

DEFAULT_RETRAIN_BUDGET = 250_000
SLOW_PERMUTATION_FOREST = forest_mod.ForestConfig(n_trees=50)


class NullMethod(str, enum.Enum):
    ASYMPTOTIC = "asymptotic"
    BOOTSTRAP = "bootstrap"
    PERMUTATION = "permutation"
    SLOW_PERMUTATION = "slow_permutation"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        for member in cls:
            if member.value == key:
                return member
        raise ConfigError(f"unknown null method {value!r}")


@dataclass(frozen=True)
class NullSpec:
    method: NullMethod = NullMethod.PERMUTATION
    cycles: int = 1000
    seed: int = 0
    alpha: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "method", NullMethod.parse(self.method))
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.method is not NullMethod.ASYMPTOTIC and self.cycles < 1:
            raise ConfigError("resampling methods need at least one cycle")


@dataclass
class TestReport:
    """Observed statistic, its estimated null and the resulting decision."""

    __test__ = False

    statistic: StatValue
    null_samples: np.ndarray
    p_value: float
    reject: bool
    spec: NullSpec
    sizes: tuple
    null_params: dict = field(default_factory=dict)

    def null_quantiles(self):
        if self.null_samples.size == 0:
            return None
        return [float(q) for q in np.quantile(self.null_samples, [0.01, 0.05, 0.5, 0.95, 0.99])]

    def to_dict(self):
        stat = self.statistic
        return {
            "statistic": stat.statistic.value,
            "value": stat.value,
            "tail": stat.tail,
            "lambda_hat_mle": stat.lambda_hat_mle,
            "lrt_total": stat.lrt_total,
            "method": self.spec.method.value,
            "B": 0 if self.spec.method is NullMethod.ASYMPTOTIC else self.spec.cycles,
            "p_value": self.p_value,
            "reject": self.reject,
            "alpha": self.spec.alpha,
            "sizes": dict(zip(("m1", "m2", "n1", "n2"), self.sizes)),
            "seed": self.spec.seed,
            "null_quantiles": self.null_quantiles(),
            "null_params": self.null_params or None,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def p_value(observed, null_samples, tail="upper"):
    """Finite-sample resampling p-value ``(1 + #{as extreme}) / (B + 1)``."""
    null_samples = np.asarray(null_samples, dtype=float)
    if tail == "upper":
        count = np.count_nonzero(null_samples >= observed)
    elif tail == "lower":
        count = np.count_nonzero(null_samples <= observed)
    else:
        raise ConfigError(f"tail must be 'upper' or 'lower', got {tail!r}")
    return (1 + int(count)) / (null_samples.size + 1)


def _report(observed, null, spec, sizes, p=None, params=None):
    if p is None:
        p = p_value(observed.value, null, observed.tail)
    return TestReport(observed, np.asarray(null, dtype=float), float(p), bool(p <= spec.alpha), spec, tuple(sizes), params or {})


def _cycle_indices(gen, method, pool_size, draw):
    if method is NullMethod.BOOTSTRAP:
        return gen.integers(0, pool_size, draw)
    return gen.permutation(pool_size)[:draw]


def _check_resampling(spec):
    if spec.method not in (NullMethod.BOOTSTRAP, NullMethod.PERMUTATION):
        raise ConfigError(f"method {spec.method.value} is not a fixed-classifier resampling method")


def resample_null_scores(stat, h_x, h_w, prior, spec, sizes=None):
    """Bootstrap or permutation null for an MI statistic from classifier scores.

    Each cycle draws ``m + n`` entries from the pooled scores (with
    replacement for bootstrap, a shuffle for permutation), calls the first
    ``m`` background and the rest experimental, and recomputes.
    """
    stat = Statistic.parse(stat)
    if stat.supervised:
        raise ConfigError("model-dependent statistics use resample_null_supervised")
    _check_resampling(spec)
    h_x = np.asarray(h_x, dtype=float)
    h_w = np.asarray(h_w, dtype=float)
    m, n = h_x.size, h_w.size
    observed = compute_mi(stat, h_x, h_w, prior)
    pooled = np.concatenate([h_x, h_w])
    null = np.empty(spec.cycles)
    for k in range(spec.cycles):
        idx = _cycle_indices(streams.rng(spec.seed, k), spec.method, m + n, m + n)
        draw = pooled[idx]
        null[k] = compute_mi(stat, draw[:m], draw[m:], prior).value
    return _report(observed, null, spec, sizes or (None, m, None, n))


def _sizes(f, m2, n2):
    return (f.n_class0, m2, f.n_class1, n2)


def resample_null(stat, test_X, test_W, f, spec):
    """Bootstrap or permutation test of an MI statistic with classifier ``f`` fixed."""
    h_x = f.predict_proba(test_X)
    h_w = f.predict_proba(test_W)
    return resample_null_scores(stat, h_x, h_w, f.prior, spec, _sizes(f, h_x.size, h_w.size))


def resample_null_supervised_ratios(stat, psi_x, psi_w, spec, sizes=None):
    """Null for MD statistics: ``n`` draws from the pooled ratios play the experimental sample."""
    stat = Statistic.parse(stat)
    if not stat.supervised:
        raise ConfigError("model-independent statistics use resample_null")
    _check_resampling(spec)
    psi_x = np.asarray(psi_x, dtype=float)
    psi_w = np.asarray(psi_w, dtype=float)
    n = psi_w.size
    observed = compute_md(stat, psi_w)
    pooled = np.concatenate([psi_x, psi_w])
    null = np.empty(spec.cycles)
    for k in range(spec.cycles):
        idx = _cycle_indices(streams.rng(spec.seed, k), spec.method, pooled.size, n)
        null[k] = compute_md(stat, pooled[idx]).value
    return _report(observed, null, spec, sizes or (None, psi_x.size, None, n))


def resample_null_supervised(stat, test_X, W, f, spec):
    """Bootstrap or permutation test of an MD statistic.

    ``f`` separates background (class 0) from signal (class 1) and was
    trained on data disjoint from ``test_X``.
    """
    psi_x = density_ratio(f.predict_proba(test_X), f.prior, SIGNAL_OVER_BACKGROUND).values
    psi_w = density_ratio(f.predict_proba(W), f.prior, SIGNAL_OVER_BACKGROUND).values
    return resample_null_supervised_ratios(stat, psi_x, psi_w, spec, _sizes(f, psi_x.size, psi_w.size))


def asymptotic_null_scores(stat, h_x, h_w, prior, spec=None, sizes=None):
    """Normal-approximation test of an MI statistic from classifier scores.

    * MI-LRT: the per-event log ratio on background test events gives the
      null mean and variance; the variance of the difference of the two
      sample means, ``s^2 (1/m + 1/n)``, scales the upper-tail z-score.
    * MI-AUC: ``N(1/2, (m + n + 1) / (12 m n))``, upper tail.
    * MI-MCE: ``N(1/2, p(1-p)/4 (1/m + 1/n))`` with ``p`` the pooled share
      of scores above the threshold, lower tail.
    """
    stat = Statistic.parse(stat)
    spec = spec or NullSpec(NullMethod.ASYMPTOTIC, cycles=0)
    h_x = np.asarray(h_x, dtype=float)
    h_w = np.asarray(h_w, dtype=float)
    m, n = h_x.size, h_w.size
    observed = compute_mi(stat, h_x, h_w, prior)
    if stat is Statistic.MI_LRT:
        ell = math.log((1 - prior) / prior) + logit(h_x, EPS)
        mean = float(np.mean(ell))
        var = float(np.var(ell, ddof=1)) if m > 1 else 0.0
        sd = math.sqrt(var * (1 / m + 1 / n))
        tail = "upper"
    elif stat is Statistic.MI_AUC:
        mean = 0.5
        sd = math.sqrt((m + n + 1) / (12 * m * n))
        tail = "upper"
    elif stat is Statistic.MI_MCE:
        mean = 0.5
        p_hat = float(np.mean(np.concatenate([h_x, h_w]) > prior))
        sd = math.sqrt(0.25 * p_hat * (1 - p_hat) * (1 / m + 1 / n))
        tail = "lower"
    else:
        raise ConfigError(f"no asymptotic null for {stat.value}")
    # rounding leaves a tiny positive variance for identical scores
    if not sd > 1e-12 * max(1.0, abs(mean)):
        raise InconclusiveTestError(f"degenerate null variance for {stat.value}")
    z = (observed.value - mean) / sd
    p = float(sps.norm.sf(z) if tail == "upper" else sps.norm.cdf(z))
    return _report(observed, np.empty(0), spec, sizes or (None, m, None, n), p, {"mean": mean, "sd": sd, "z": z})


def asymptotic_null(stat, test_X, test_W, f, spec=None):
    h_x = f.predict_proba(test_X)
    h_w = f.predict_proba(test_W)
    return asymptotic_null_scores(stat, h_x, h_w, f.prior, spec, _sizes(f, h_x.size, h_w.size))


def _in_sample(stats_, x, labels, cfg, workers):
    f = forest_mod.fit(x[labels == 0], x[labels == 1], cfg, workers=workers)
    h = f.votes(x)
    return [compute_mi(s, h[labels == 0], h[labels == 1], f.prior).value for s in stats_]


def slow_permutation_multi(stats_, X, W, cfg=None, spec=None, budget=DEFAULT_RETRAIN_BUDGET,
                           allow_expensive=False, workers=None):
    """In-sample permutation tests of several MI statistics sharing the same re-trainings.

    The observed statistics come from a forest trained on all of ``X`` and
    ``W``.  Each cycle shuffles the background/experimental labels over the
    pooled rows, re-trains, and recomputes the in-sample statistics.
    """
    stats_ = [Statistic.parse(s) for s in stats_]
    if any(s.supervised for s in stats_):
        raise ConfigError("slow permutation serves model-independent statistics only")
    spec = spec or NullSpec(NullMethod.SLOW_PERMUTATION)
    if spec.method is not NullMethod.SLOW_PERMUTATION:
        raise ConfigError("slow_permutation needs a slow_permutation NullSpec")
    cfg = cfg or SLOW_PERMUTATION_FOREST
    projected = (spec.cycles + 1) * cfg.n_trees
    if projected > budget and not allow_expensive:
        raise ConfigError(
            f"slow permutation would train {projected} trees (budget {budget}); "
            "lower cycles/n_trees or pass allow_expensive"
        )
    x0 = X.features if hasattr(X, "features") else np.asarray(X, dtype=float)
    x1 = W.features if hasattr(W, "features") else np.asarray(W, dtype=float)
    x = np.vstack([x0, x1])
    labels = np.concatenate([np.zeros(len(x0), dtype=np.int8), np.ones(len(x1), dtype=np.int8)])
    m, n = len(x0), len(x1)
    observed_values = _in_sample(stats_, x, labels, cfg, workers)
    null = np.empty((spec.cycles, len(stats_)))
    for k in range(spec.cycles):
        gen = streams.rng(spec.seed, k)
        perm = labels[gen.permutation(m + n)]
        cycle_cfg = cfg.with_(seed=streams.int_seed(spec.seed, "retrain", k))
        null[k] = _in_sample(stats_, x, perm, cycle_cfg, workers)
    reports = []
    for j, s in enumerate(stats_):
        value = observed_values[j]
        observed = StatValue(s, value, lrt_total=2.0 * n * value if s is Statistic.MI_LRT else None)
        reports.append(_report(observed, null[:, j], spec, (m, m, n, n)))
    return reports


def slow_permutation(stat, X, W, cfg=None, spec=None, budget=DEFAULT_RETRAIN_BUDGET,
                     allow_expensive=False, workers=None):
    """In-sample permutation test of one MI statistic; see :func:`slow_permutation_multi`."""
    return slow_permutation_multi([stat], X, W, cfg, spec, budget, allow_expensive, workers)[0]


def run_tests(tests, X, W, Y=None, split=None, cfg=None, slow_cfg=None, budget=DEFAULT_RETRAIN_BUDGET,
              allow_expensive=False, workers=None):
    """Run several ``(statistic, NullSpec)`` tests on one dataset.

    Background ``X`` and experimental ``W`` are split once.  The
    background/experimental forest and, when a model-dependent statistic
    is requested, the background/signal forest trained on the training
    half of ``X`` against ``Y`` are each fitted at most once and shared.
    Slow-permutation tests with the same NullSpec share their re-trainings.

    Returns ``(reports, elapsed_ms)`` in the order of ``tests``; the time
    of each shared fit is charged to every test that uses it.
    """
    tests = [(Statistic.parse(s), spec) for s, spec in tests]
    cfg = cfg or forest_mod.ForestConfig()
    split = split or data_mod.SplitSpec.halves(X.n, W.n)
    ib1, ib2, ie1, ie2 = data_mod.split_indices(X.n, W.n, split)
    cache = {}

    def timed(key, build):
        if key not in cache:
            t0 = time.perf_counter()
            cache[key] = (build(), 1000 * (time.perf_counter() - t0))
        return cache[key]

    def mi_scores():
        f = forest_mod.fit(X.take(ib1), W.take(ie1), cfg, workers=workers)
        return f, f.predict_proba(X.take(ib2)), f.predict_proba(W.take(ie2))

    def md_ratios():
        if Y is None:
            raise ConfigError("model-dependent statistics need a signal sample")
        f = forest_mod.fit(X.take(ib1), Y, cfg, workers=workers)
        psi_x = density_ratio(f.predict_proba(X.take(ib2)), f.prior).values
        psi_w = density_ratio(f.predict_proba(W), f.prior).values
        return f, psi_x, psi_w

    reports, elapsed = [None] * len(tests), [0.0] * len(tests)
    slow_groups = {}
    for i, (stat, spec) in enumerate(tests):
        if spec.method is NullMethod.SLOW_PERMUTATION:
            if stat.supervised:
                raise ConfigError("slow permutation serves model-independent statistics only")
            slow_groups.setdefault(spec, []).append(i)
            continue
        if stat.supervised:
            if spec.method is NullMethod.ASYMPTOTIC:
                raise ConfigError(f"no asymptotic null for {stat.value}")
            (f, psi_x, psi_w), fit_ms = timed("md", md_ratios)
            t0 = time.perf_counter()
            rep = resample_null_supervised_ratios(stat, psi_x, psi_w, spec, _sizes(f, psi_x.size, psi_w.size))
        else:
            (f, h_x, h_w), fit_ms = timed("mi", mi_scores)
            t0 = time.perf_counter()
            sizes = _sizes(f, h_x.size, h_w.size)
            if spec.method is NullMethod.ASYMPTOTIC:
                rep = asymptotic_null_scores(stat, h_x, h_w, f.prior, spec, sizes)
            else:
                rep = resample_null_scores(stat, h_x, h_w, f.prior, spec, sizes)
        reports[i] = rep
        elapsed[i] = fit_ms + 1000 * (time.perf_counter() - t0)
    for spec, idx in slow_groups.items():
        t0 = time.perf_counter()
        group = slow_permutation_multi([tests[i][0] for i in idx], X, W, slow_cfg, spec, budget,
                                       allow_expensive, workers)
        ms = 1000 * (time.perf_counter() - t0)
        for i, rep in zip(idx, group):
            reports[i], elapsed[i] = rep, ms
    return reports, elapsed
