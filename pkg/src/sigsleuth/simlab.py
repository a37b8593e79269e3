"""Synthetic data and power studies.

Gaussian-mixture models stand in for background and signal physics.  The
module builds experimental samples with a binomial number of signal rows,
applies the misspecified-signal distortion and estimates test power over
replicated simulations.
"""
import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as sps

from . import calibrate, streams
from .data import BACKGROUND, SIGNAL, EventTable, weighted_sample
from .errors import ConfigError
from .forest import ForestConfig
from .teststats import Statistic


def _generator(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return streams.rng(seed, "sample")


def default_names(d):
    return tuple(f"x{j}" for j in range(d))


class MixtureModel:
    """Finite mixture of multivariate Normals.

    Parameters
    ----------
    weights : (K,) positive, normalised to sum to one (within 1e-8)
    means : (K, d)
    covs : (K, d, d) symmetric positive definite
    """

    def __init__(self, weights, means, covs, column_names=None):
        w = np.asarray(weights, dtype=float).ravel()
        mu = np.atleast_2d(np.asarray(means, dtype=float))
        cov = np.asarray(covs, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise ConfigError(f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}")
        if np.any(~(w > 0)) or abs(w.sum() - 1) > 1e-8:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ConfigError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ConfigError("covariances must be positive definite") from None
        self.weights, self.means, self.covs, self._chol = w / w.sum(), mu, cov, chol
        self.column_names = tuple(column_names) if column_names else default_names(d)
        if len(self.column_names) != d:
            raise ConfigError("one column name per dimension required")

    @property
    def d(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size

    def logpdf(self, x):
        x = np.atleast_2d(x)
        parts = [
            np.log(w) + sps.multivariate_normal(m, c).logpdf(x)
            for w, m, c in zip(self.weights, self.means, self.covs)
        ]
        return np.logaddexp.reduce(np.atleast_2d(np.array(parts)), axis=0)

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
            "column_names": list(self.column_names),
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(doc["weights"], doc["means"], doc["covs"], doc.get("column_names"))
        except KeyError as exc:
            raise ConfigError(f"mixture file lacks field {exc}") from None

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def sample_mixture(m, k, seed=0, label=None):
    """``k`` iid draws; the component is chosen by weight, then a Normal draw."""
    if k < 1:
        raise ConfigError("sample size must be >= 1")
    gen = _generator(seed)
    comp = gen.choice(m.n_components, size=k, p=m.weights)
    z = gen.standard_normal((k, m.d))
    x = m.means[comp] + np.einsum("nij,nj->ni", m._chol[comp], z)
    labels = None if label is None else np.full(k, label, dtype=np.int8)
    return EventTable(x, m.column_names, labels=labels)


def make_experimental(background, signal, n, lam, seed=0):
    """``s ~ Binomial(n, lam)`` signal rows and ``n - s`` background rows, shuffled.

    The returned table carries the true labels (1 for signal) so that
    diagnostics and :func:`distort_signal` can find the signal rows.
    """
    if not 0 <= lam <= 1:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if background.d != signal.d:
        raise ConfigError("background and signal mixtures differ in dimension")
    gen = _generator(seed)
    s = int(gen.binomial(n, lam))
    parts = []
    if n - s:
        parts.append(sample_mixture(background, n - s, gen, BACKGROUND))
    if s:
        parts.append(sample_mixture(signal, s, gen, SIGNAL).replace(column_names=background.column_names))
    t = EventTable.concat(parts)
    return t.take(gen.permutation(n))


def distort_signal(t, column, factor=0.7):
    """Shrink a column of the signal rows towards its minimum.

    ``x* = x - factor * (x - min x)`` with the minimum taken over the signal
    rows.  Tables without labels are treated as pure signal.
    """
    if not 0 <= factor < 1:
        raise ConfigError(f"distortion factor must lie in [0, 1), got {factor}")
    j = t.column_index(column)
    rows = np.ones(t.n, dtype=bool) if t.labels is None else t.labels == SIGNAL
    x = np.array(t.features)
    if rows.any():
        col = x[rows, j]
        x[rows, j] = col - factor * (col - col.min())
    return t.replace(features=x)


def desk_models():
    """Default 5-D mixtures: 3-component background, 2-component signal."""
    d = 5
    eye = np.eye(d)
    bg = MixtureModel(
        [0.5, 0.3, 0.2],
        [np.zeros(d), np.r_[1.5, -1.0, 0.5, 0.0, 0.0], np.r_[-1.0, 1.0, 0.0, 1.0, -0.5]],
        [eye, 0.6 * eye, 1.5 * eye],
    )
    sig = MixtureModel(
        [0.6, 0.4],
        [np.r_[1.2, 1.2, 0.0, 0.0, 0.0], np.r_[-1.2, -1.2, 1.2, 0.0, 0.0]],
        [0.5 * eye, 0.5 * eye],
    )
    return bg, sig


def misspecified_models():
    """Mixtures for the distortion study.

    The signal is offset along ``x0`` and otherwise matches the background.
    Shrinking ``x0`` towards its sample minimum, which lies below the
    background mode, turns the signal rows into a narrow spike inside the
    dense part of the background where the undistorted signal/background
    ratio is small.
    """
    d = 5
    eye = np.eye(d)
    bg = MixtureModel([1.0], [np.zeros(d)], [eye])
    cov = eye.copy()
    cov[0, 0] = 0.6**2
    sig = MixtureModel([1.0], [np.r_[1.5, 0.0, 0.0, 0.0, 0.0]], [cov])
    return bg, sig


def fig3_toy(m_b, n, lam=0.5, seed=0, offsets=(-1.0, 0.0, 1.0), width=0.05):
    """Background uniform on ``[-1, 1]^2``; signal near lines ``x1 + x2 = c``.

    Returns ``(background, experimental)``.  The experimental sample mixes
    ``Binomial(n, lam)`` signal rows into uniform background.
    """
    gen = streams.rng(seed, "fig3")
    names = ("x1", "x2")
    X = EventTable(gen.uniform(-1, 1, (m_b, 2)), names, labels=np.zeros(m_b, dtype=np.int8))
    s = int(gen.binomial(n, lam))
    bg = gen.uniform(-1, 1, (n - s, 2))
    sig = np.empty((0, 2))
    while sig.shape[0] < s:
        c = gen.choice(np.asarray(offsets), size=4 * s)
        u = gen.uniform(-2, 2, 4 * s)
        v = c / np.sqrt(2) + width * gen.standard_normal(4 * s)
        pts = np.column_stack([(u + v) / np.sqrt(2), (v - u) / np.sqrt(2)])
        pts = pts[np.all(np.abs(pts) <= 1, axis=1)]
        sig = np.vstack([sig, pts])
    x = np.vstack([bg, sig[:s]])
    labels = np.r_[np.zeros(n - s), np.ones(s)].astype(np.int8)
    order = gen.permutation(n)
    return X, EventTable(x[order], names, labels=labels[order])


@dataclass(frozen=True)
class ExperimentDesign:
    """Grid of signal strengths and sample sizes for a power study.

    ``m_b`` background rows and ``m_s`` signal rows are drawn per replicate
    alongside ``n`` experimental rows; ``m_b = None`` means ``m_b = n``.
    """

    lambdas: tuple = (0.0, 0.05, 0.1, 0.2)
    ns: tuple = (2000,)
    m_b: int = None
    m_s: int = 1000
    replicates: int = 100
    seed: int = 0
    alpha: float = 0.05
    distortion: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(x) for x in np.atleast_1d(self.lambdas)))
        object.__setattr__(self, "ns", tuple(int(x) for x in np.atleast_1d(self.ns)))
        if any(not 0 <= x <= 1 for x in self.lambdas):
            raise ConfigError("every lambda must lie in [0, 1]")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if any(n < 4 for n in self.ns):
            raise ConfigError("experimental size must be >= 4")
        if self.distortion is not None:
            col, factor = self.distortion
            object.__setattr__(self, "distortion", (str(col), float(factor)))


def replicate_data(design, background, signal, lam, n, r):
    """Background, experimental and signal samples for one replicate.

    Replicate ``r`` at size ``n`` uses the same random stream for every
    lambda, so power curves are compared on common random numbers.
    """
    m_b = design.m_b or n
    X = sample_mixture(background, m_b, streams.rng(design.seed, "background", n, r), BACKGROUND)
    W = make_experimental(background, signal, n, lam, streams.rng(design.seed, "experimental", n, r))
    Y = sample_mixture(signal, design.m_s, streams.rng(design.seed, "signal", n, r), SIGNAL)
    Y = Y.replace(column_names=X.column_names)
    if design.distortion is not None:
        W = distort_signal(W, *design.distortion)
    return X, W, Y


def clopper_pearson(k, n, level=0.95):
    ci = sps.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


@dataclass
class PowerTable:
    rows: list = field(default_factory=list)

    COLUMNS = ("statistic", "method", "lambda", "n", "replicates", "rejections", "power",
               "ci_lo", "ci_hi", "mean_runtime_ms")

    def lookup(self, statistic, method, lam, n):
        for row in self.rows:
            if (row["statistic"], row["method"], row["lambda"], row["n"]) == (statistic, method, lam, n):
                return row
        raise KeyError((statistic, method, lam, n))

    def to_csv(self, timing=True):
        buf = io.StringIO()
        w = csv.DictWriter(buf, self.COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            out = dict(row)
            out["mean_runtime_ms"] = f"{row['mean_runtime_ms']:.3f}" if timing else ""
            w.writerow(out)
        return buf.getvalue()

    def to_dict(self, timing=True):
        rows = [dict(r) for r in self.rows]
        if not timing:
            for r in rows:
                r["mean_runtime_ms"] = None
        return {"columns": list(self.COLUMNS), "rows": rows}


def power_study(design, background, signal, tests, cfg=None, slow_cfg=None,
                allow_expensive=False, workers=None):
    """Rejection rates of each ``(statistic, NullSpec)`` over replicated simulations.

    Every replicate draws fresh data, runs all tests on it, and uses null
    seeds derived from ``(design.seed, n, r)``.  The result is a
    deterministic function of the inputs apart from the runtimes.
    """
    tests = [(Statistic.parse(s), replace(spec, alpha=design.alpha)) for s, spec in tests]
    if not tests:
        raise ConfigError("power study needs at least one test")
    cfg = cfg or ForestConfig()
    if any(s.supervised for s, _ in tests) and design.m_s < 1:
        raise ConfigError("model-dependent tests need m_s >= 1")
    grid = [(lam, n, r) for n in design.ns for lam in design.lambdas for r in range(design.replicates)]

    def one(cell):
        lam, n, r = cell
        X, W, Y = replicate_data(design, background, signal, lam, n, r)
        rep_tests = [(s, replace(spec, seed=streams.int_seed(spec.seed, "null", n, r))) for s, spec in tests]
        rep_cfg = cfg.with_(seed=streams.int_seed(cfg.seed, "forest", n, r))
        reports, ms = calibrate.run_tests(rep_tests, X, W, Y, cfg=rep_cfg, slow_cfg=slow_cfg,
                                          allow_expensive=allow_expensive, workers=1)
        return [rep.reject for rep in reports], ms

    results = streams.parallel_map(one, grid, workers)
    table = PowerTable()
    for n in design.ns:
        for lam in design.lambdas:
            cells = [res for (l_, n_, _), res in zip(grid, results) if l_ == lam and n_ == n]
            for j, (stat, spec) in enumerate(tests):
                k = sum(c[0][j] for c in cells)
                lo, hi = clopper_pearson(k, len(cells))
                table.rows.append({
                    "statistic": stat.value,
                    "method": spec.method.value,
                    "lambda": lam,
                    "n": n,
                    "replicates": len(cells),
                    "rejections": int(k),
                    "power": k / len(cells),
                    "ci_lo": lo,
                    "ci_hi": hi,
                    "mean_runtime_ms": float(np.mean([c[1][j] for c in cells])),
                })
    return table


HIGGS_SIZES = {"m_b": 40_403, "m_s": 20_403, "n": 40_403, "test": 20_000}


def pool_replicate(background_pool, signal_pool, lam, seed=0, m_b=HIGGS_SIZES["m_b"],
                   m_s=HIGGS_SIZES["m_s"], n=HIGGS_SIZES["n"]):
    """Background, experimental and signal samples drawn from finite event pools.

    Rows are taken by weight without replacement, and no pool row appears in
    more than one of the three samples.  The experimental sample holds
    ``Binomial(n, lam)`` signal rows.
    """
    gen = streams.rng(seed, "pool-replicate")
    s = int(gen.binomial(n, lam))
    if m_b + n - s > background_pool.n or m_s + s > signal_pool.n:
        raise ConfigError("event pools are too small for the requested sample sizes")
    bg = weighted_sample(background_pool, m_b + n - s, False, gen)
    sig = weighted_sample(signal_pool, m_s + s, False, gen)
    X = bg.take(np.arange(m_b)).replace(weights=None, labels=np.zeros(m_b, dtype=np.int8))
    Y = sig.take(np.arange(m_s)).replace(weights=None, labels=np.ones(m_s, dtype=np.int8))
    parts = []
    if n - s:
        parts.append(bg.take(np.arange(m_b, m_b + n - s)).replace(weights=None, labels=np.zeros(n - s, dtype=np.int8)))
    if s:
        parts.append(sig.take(np.arange(m_s, m_s + s)).replace(weights=None, labels=np.ones(s, dtype=np.int8)))
    W = EventTable.concat(parts)
    return X, W.take(gen.permutation(n)), Y
