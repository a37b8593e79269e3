"""Active-subspace interpretation of a trained classifier.

The logit of the classifier output is smoothed with a Gaussian-kernel local
linear regression.  The slope of each local fit estimates the gradient of
the logit surface; slopes are divided by their standard errors, and the
mean and covariance of these standardized gradients summarise where the
classifier surface is tilted and along which directions it varies most.
"""
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import forest as forest_mod
from . import streams
from .errors import ConfigError, DataError
from .teststats import EPS, logit

SD_FLOOR = 1e-12
WEIGHT_CUTOFF = 1e-12
RIDGE = 1e-8
_CHUNK_CELLS = 4_000_000


@dataclass(frozen=True)
class SmootherConfig:
    """Kernel settings.

    The Gaussian kernel along feature ``j`` has standard deviation
    ``sd_j / h`` where ``sd_j`` is the sample standard deviation of that
    feature over the evaluation points, so larger ``h`` means a more local
    fit.
    """

    h: float = 0.5
    epsilon: float = EPS
    kernel: str = "gaussian"

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigError("smoothing parameter h must be positive")
        if not 0 < self.epsilon < 0.5:
            raise ConfigError("epsilon must lie in (0, 0.5)")
        if self.kernel != "gaussian":
            raise ConfigError("only the gaussian kernel is supported")


def logit_surface(f, table, epsilon=EPS):
    """``log(h / (1 - h))`` of the forest output, clamped to ``[eps, 1 - eps]``."""
    return logit(f.predict_proba(table), epsilon)


@dataclass
class GradientField:
    points: np.ndarray
    slopes: np.ndarray
    sd_estimates: np.ndarray
    gradients: np.ndarray
    fitted: np.ndarray


def _chunks(n_query, n_points, d):
    size = max(1, _CHUNK_CELLS // max(1, n_points * (d + 1)))
    return range(0, n_query, size), size


def smooth(points, logits, queries, cfg=None, scales=None):
    """Local linear fits of ``logits`` over ``points`` evaluated at ``queries``.

    Returns ``(fitted, slopes, slope_sd)``.  The design is centred at each
    query and the response at its mean, so constant and affine surfaces are
    reproduced to rounding error.
    Standard errors use the homoskedastic form ``s^2 (X'WX)^-1`` with
    ``s^2`` the weighted mean squared residual.
    """
    cfg = cfg or SmootherConfig()
    z = np.asarray(points, dtype=float)
    y = np.asarray(logits, dtype=float)
    q = np.asarray(queries, dtype=float)
    n, d = z.shape
    if y.shape != (n,):
        raise DataError("one logit per point required")
    if scales is None:
        scales = np.std(z, axis=0, ddof=1)
    if np.any(~(scales > 0)):
        raise DataError("every feature needs positive spread for the kernel scale")
    bw = scales / cfg.h
    zs = z / bw
    y0 = y.mean()
    yc = y - y0
    fitted = np.empty(q.shape[0])
    slopes = np.empty((q.shape[0], d))
    sds = np.empty((q.shape[0], d))
    starts, size = _chunks(q.shape[0], n, d)
    eye = np.eye(d + 1)
    ridged = 0
    for s in starts:
        qc = q[s : s + size]
        # design in kernel units keeps conditioning and the ridge scale-free
        u = zs[None, :, :] - (qc / bw)[:, None, :]
        w = np.exp(-0.5 * np.einsum("cnj,cnj->cn", u, u))
        w[w < WEIGHT_CUTOFF] = 0.0
        design = np.concatenate([np.ones(u.shape[:2] + (1,)), u], axis=2)
        xtw = design * w[:, :, None]
        a = np.einsum("cni,cnk->cik", xtw, design)
        rhs = np.einsum("cni,n->ci", xtw, yc)
        cond_bad = np.linalg.cond(a) > 1e12
        if cond_bad.any():
            ridged += int(cond_bad.sum())
            a[cond_bad] += RIDGE * eye
        beta = np.linalg.solve(a, rhs[:, :, None])[:, :, 0]
        resid = yc[None, :] - np.einsum("cni,ci->cn", design, beta)
        wsum = w.sum(axis=1)
        s2 = np.einsum("cn,cn->c", w, resid * resid) / wsum
        cov_diag = np.diagonal(np.linalg.inv(a), axis1=1, axis2=2)[:, 1:]
        fitted[s : s + size] = beta[:, 0] + y0
        slopes[s : s + size] = beta[:, 1:] / bw
        sds[s : s + size] = np.sqrt(np.maximum(s2[:, None] * cov_diag, 0.0)) / bw
    if ridged:
        warnings.warn(f"singular local design at {ridged} points; ridge {RIDGE} added", RuntimeWarning)
    return fitted, slopes, sds


def local_linear_gradients(points, logits, cfg=None):
    """Standardized logit gradients at every point.

    Slopes are divided by their standard errors, floored at ``1e-12``;
    a slope that is exactly zero stays zero.
    """
    z = np.asarray(points, dtype=float)
    n, d = z.shape
    if n <= d + 1:
        raise DataError(f"need more than d + 1 = {d + 1} points, got {n}")
    fitted, slopes, sds = smooth(z, logits, z, cfg)
    gradients = slopes / np.maximum(sds, SD_FLOOR)
    if not np.all(np.isfinite(gradients)):
        raise DataError("non-finite gradient estimates")
    return GradientField(z, slopes, sds, gradients, fitted)


def fix_sign(vectors, anchors, reference_signs):
    """Flip columns so the anchor component of each has the reference sign."""
    vectors = np.array(vectors, dtype=float)
    for j, (k, sgn) in enumerate(zip(anchors, reference_signs)):
        if np.sign(vectors[k, j]) != sgn and vectors[k, j] != 0:
            vectors[:, j] = -vectors[:, j]
    return vectors


def anchor_rule(vectors):
    """Anchor index and sign per column: the largest-magnitude component."""
    vectors = np.asarray(vectors, dtype=float)
    anchors = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[anchors, np.arange(vectors.shape[1])])
    return anchors, signs


def _canonical_signs(vectors):
    out = np.array(vectors, dtype=float)
    for j in range(out.shape[1]):
        nz = np.flatnonzero(np.abs(out[:, j]) > 1e-12)
        if nz.size and out[nz[0], j] < 0:
            out[:, j] = -out[:, j]
    return out


@dataclass
class SubspaceReport:
    mean_gradient: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    covariance: np.ndarray
    column_names: tuple = None
    bootstrap: dict = field(default_factory=dict)

    def to_dict(self, n_vectors=None):
        k = self.eigenvalues.size if n_vectors is None else min(n_vectors, self.eigenvalues.size)
        doc = {
            "variables": list(self.column_names) if self.column_names else None,
            "mean_gradient": self.mean_gradient.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "eigenvectors": [self.eigenvectors[:, j].tolist() for j in range(k)],
        }
        if self.bootstrap:
            boot = dict(self.bootstrap)
            boot["eigenvector_draws"] = [v.tolist() for v in boot["eigenvector_draws"][:k]]
            boot["eigenvector_bands"] = [v.tolist() for v in boot["eigenvector_bands"][:k]]
            for key in ("mean_gradient_draws", "mean_gradient_band", "eigenvalue_draws"):
                boot[key] = np.asarray(boot[key]).tolist()
            doc["bootstrap"] = boot
        return doc

    def to_json(self, n_vectors=None, **kw):
        return json.dumps(self.to_dict(n_vectors), **kw)


def active_subspace(g, column_names=None):
    """Mean and eigen-decomposition of the covariance of standardized gradients."""
    grads = g.gradients if isinstance(g, GradientField) else np.asarray(g, dtype=float)
    n, d = grads.shape
    if n < d + 1:
        raise DataError(f"need at least d + 1 = {d + 1} gradients, got {n}")
    if not np.all(np.isfinite(grads)):
        raise DataError("non-finite gradients")
    mean = grads.mean(axis=0)
    centred = grads - mean
    cov = centred.T @ centred / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    return SubspaceReport(mean, vals[order], _canonical_signs(vecs[:, order]), cov, column_names)


def _pipeline(X, W, cfg, scfg, idx, workers):
    ib1, ib2, ie1, ie2 = idx
    f = forest_mod.fit(X.take(ib1), W.take(ie1), cfg, workers=workers)
    test = data_mod.EventTable.concat([X.take(ib2), W.take(ie2)])
    field_ = local_linear_gradients(test.features, logit_surface(f, test, scfg.epsilon), scfg)
    return active_subspace(field_, X.column_names)


def subspace_from_data(X, W, cfg=None, scfg=None, split=None, workers=None):
    """Train on the training halves and analyse the pooled test halves."""
    cfg = cfg or forest_mod.ForestConfig()
    scfg = scfg or SmootherConfig()
    split = split or data_mod.SplitSpec.halves(X.n, W.n)
    return _pipeline(X, W, cfg, scfg, data_mod.split_indices(X.n, W.n, split), workers)


def bootstrap_subspace(X, W, cfg=None, scfg=None, split=None, B=500, alpha=0.05, seed=0,
                       n_vectors=None, workers=None):
    """Point estimate plus percentile bands from ``B`` re-trained resamples.

    Bootstrap eigenvectors are sign-aligned to the point estimate: for
    vector ``j`` the component ``k_j`` of largest magnitude in the point
    estimate must keep its sign.
    """
    if B < 2:
        raise ConfigError("bootstrap needs B >= 2")
    cfg = cfg or forest_mod.ForestConfig()
    scfg = scfg or SmootherConfig()
    split = split or data_mod.SplitSpec.halves(X.n, W.n)
    point = subspace_from_data(X, W, cfg, scfg, split, workers)
    d = point.eigenvalues.size
    k = d if n_vectors is None else min(n_vectors, d)
    anchors, signs = anchor_rule(point.eigenvectors[:, :k])

    def draw(c):
        gen = streams.rng(seed, "subspace-bootstrap", c)
        idx = data_mod.bootstrap_split_indices(X.n, W.n, split, gen)
        c_cfg = cfg.with_(seed=streams.int_seed(seed, "subspace-forest", c))
        return _pipeline(X, W, c_cfg, scfg, idx, 1)

    reps = streams.parallel_map(draw, range(B), workers)
    means = np.array([r.mean_gradient for r in reps])
    vals = np.array([r.eigenvalues for r in reps])
    vecs = np.array([fix_sign(r.eigenvectors[:, :k], anchors, signs) for r in reps])
    q = [alpha / 2, 1 - alpha / 2]
    point.bootstrap = {
        "B": B,
        "alpha": alpha,
        "seed": seed,
        "anchors": anchors.tolist(),
        "mean_gradient_draws": means,
        "mean_gradient_band": np.quantile(means, q, axis=0).T,
        "eigenvalue_draws": vals,
        "eigenvector_draws": [vecs[:, :, j] for j in range(k)],
        "eigenvector_bands": [np.quantile(vecs[:, :, j], q, axis=0).T for j in range(k)],
    }
    return point
