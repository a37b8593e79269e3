"""Classifier-based test statistics.

Model-dependent statistics work on the estimated signal/background density
ratio; model-independent ones work directly on the outputs of a classifier
trained to separate experimental from background events.
"""
import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

EPS = 1e-10
LAMBDA_GRID_POINTS = 1001


class Statistic(str, enum.Enum):
    MD_LRT = "md-lrt"
    MD_SCORE = "md-score"
    MI_LRT = "mi-lrt"
    MI_AUC = "mi-auc"
    MI_MCE = "mi-mce"

    @property
    def supervised(self):
        return self in (Statistic.MD_LRT, Statistic.MD_SCORE)

    @property
    def tail(self):
        return "lower" if self is Statistic.MI_MCE else "upper"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise ConfigError(f"unknown statistic {value!r}")


SIGNAL_OVER_BACKGROUND = "signal_over_background"
EXPERIMENTAL_OVER_BACKGROUND = "experimental_over_background"


@dataclass(frozen=True)
class DensityRatio:
    values: np.ndarray
    kind: str
    prior: float


@dataclass(frozen=True)
class StatValue:
    """A statistic's value.

    For MI-LRT ``value`` is the per-event form ``T / (2 n)`` and
    ``lrt_total`` carries ``T`` itself.
    """

    statistic: Statistic
    value: float
    lambda_hat_mle: float = None
    lrt_total: float = None

    @property
    def tail(self):
        return self.statistic.tail


def _probs(h, name="h"):
    h = np.asarray(h, dtype=float).ravel()
    if h.size == 0:
        raise DataError(f"{name} is empty")
    if np.any(~np.isfinite(h)) or np.any((h < 0) | (h > 1)):
        raise DataError(f"{name} must contain probabilities in [0, 1]")
    return h


def _check_prior(prior):
    if not 0 < prior < 1:
        raise ConfigError(f"prior must lie in (0, 1), got {prior}")


def clamp(h, eps=EPS):
    return np.clip(h, eps, 1 - eps)


def logit(h, eps=EPS):
    h = clamp(np.asarray(h, dtype=float), eps)
    return np.log(h) - np.log1p(-h)


def density_ratio(h_values, prior, kind=SIGNAL_OVER_BACKGROUND, eps=EPS):
    """Invert posterior class-1 probabilities into a density ratio.

    ``((1 - prior) / prior) * h / (1 - h)`` with ``h`` clamped to
    ``[eps, 1 - eps]`` so the result is always finite.
    """
    _check_prior(prior)
    h = clamp(_probs(h_values), eps)
    return DensityRatio(((1 - prior) / prior) * (h / (1 - h)), kind, float(prior))


def _psi(psi):
    values = psi.values if isinstance(psi, DensityRatio) else psi
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise DataError("density ratio is empty")
    if isinstance(psi, DensityRatio) and psi.kind != SIGNAL_OVER_BACKGROUND:
        raise ConfigError("model-dependent statistics need a signal/background ratio")
    return values


def mixture_loglik(psi_values, lam):
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(1 - lam + lam * psi_values)))


def lambda_mle_grid(psi_values, grid_points=LAMBDA_GRID_POINTS):
    """Grid maximiser of ``sum log(1 - lam + lam * psi)`` over ``[0, 1]``.

    The log-likelihood is concave in ``lam``, so its increments along the
    grid are non-increasing and the first grid point whose forward increment
    is not positive is the maximiser (ties go to the smaller ``lam``).  A
    binary search finds it in ``O(n log grid)``.
    """
    psi_values = np.asarray(psi_values, dtype=float)
    last = grid_points - 1

    def loglik(k):
        return mixture_loglik(psi_values, k / last)

    lo, hi = 0, last
    while lo < hi:
        mid = (lo + hi) // 2
        if loglik(mid + 1) - loglik(mid) > 0:
            lo = mid + 1
        else:
            hi = mid
    return lo / last, loglik(lo) - loglik(0)


def md_lrt(psi, grid_points=LAMBDA_GRID_POINTS):
    """Likelihood ratio statistic ``2 sum log(1 - lam_hat + lam_hat psi)``."""
    values = _psi(psi)
    lam, gain = lambda_mle_grid(values, grid_points)
    return StatValue(Statistic.MD_LRT, max(0.0, 2.0 * gain), lambda_hat_mle=lam)


def md_score(psi):
    """Score statistic: the mean of ``psi - 1``."""
    values = _psi(psi)
    return StatValue(Statistic.MD_SCORE, float(np.mean(values - 1.0)))


def mi_lrt(h_on_test_W, prior, eps=EPS):
    """Per-event semi-supervised LRT ``log((1-pi)/pi) + mean logit h(W)``."""
    _check_prior(prior)
    h = _probs(h_on_test_W, "h(W)")
    value = float(np.log((1 - prior) / prior) + np.mean(logit(h, eps)))
    return StatValue(Statistic.MI_LRT, value, lrt_total=2.0 * h.size * value)


def auc_count(h_x, h_w, ties="strict"):
    """Number of (X, W) pairs with ``h(W) > h(X)``, via one sort.

    With ``ties="half"`` tied pairs count one half.
    """
    xs = np.sort(h_x)
    below = np.searchsorted(xs, h_w, side="left")
    count = float(np.sum(below, dtype=np.int64))
    if ties == "half":
        upto = np.searchsorted(xs, h_w, side="right")
        count += 0.5 * float(np.sum(upto - below, dtype=np.int64))
    elif ties != "strict":
        raise ConfigError(f"ties must be 'strict' or 'half', got {ties!r}")
    return count


def mi_auc(h_on_test_X, h_on_test_W, ties="strict"):
    """Fraction of (X, W) pairs ranked with the experimental event strictly higher."""
    h_x = _probs(h_on_test_X, "h(X)")
    h_w = _probs(h_on_test_W, "h(W)")
    return StatValue(Statistic.MI_AUC, auc_count(h_x, h_w, ties) / (h_x.size * h_w.size))


def mi_mce(h_on_test_X, h_on_test_W, threshold):
    """Average of the false positive rate ``h(X) > pi`` and false negative rate ``h(W) < pi``."""
    h_x = _probs(h_on_test_X, "h(X)")
    h_w = _probs(h_on_test_W, "h(W)")
    value = 0.5 * (np.mean(h_x > threshold) + np.mean(h_w < threshold))
    return StatValue(Statistic.MI_MCE, float(value))


def compute_mi(stat, h_x, h_w, prior):
    """Dispatch a model-independent statistic on classifier outputs."""
    stat = Statistic.parse(stat)
    if stat is Statistic.MI_LRT:
        return mi_lrt(h_w, prior)
    if stat is Statistic.MI_AUC:
        return mi_auc(h_x, h_w)
    if stat is Statistic.MI_MCE:
        return mi_mce(h_x, h_w, prior)
    raise ConfigError(f"{stat.value} is not a model-independent statistic")


def compute_md(stat, psi_values):
    stat = Statistic.parse(stat)
    if stat is Statistic.MD_LRT:
        return md_lrt(psi_values)
    if stat is Statistic.MD_SCORE:
        return md_score(psi_values)
    raise ConfigError(f"{stat.value} is not a model-dependent statistic")
