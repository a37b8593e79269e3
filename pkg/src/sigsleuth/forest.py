"""Random forest producing class-1 vote fractions.

Trees are grown with scikit-learn's CART builder (Gini impurity, thresholds
at midpoints between sorted feature values) on bagged resamples, then
copied into flat arrays owned by this module.  Prediction, serialization
and seeding are handled here: tree ``i`` draws everything from the stream
``(seed, i)``, so a forest is identical for any worker count.

Features are compared at single precision, matching the builder that
chose the thresholds.
"""
import json
import math
from dataclasses import asdict, dataclass

import numba
import numpy as np
from sklearn.tree import DecisionTreeClassifier

from . import streams
from .errors import ConfigError, DataError

FORMAT_VERSION = 1
LEAF = -1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = None
    min_leaf: int = 5
    features_per_split: object = "sqrt"
    seed: int = 0
    bootstrap: bool = True
    platt: bool = False

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ConfigError("min_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1 or None")
        fps = self.features_per_split
        if fps != "sqrt" and (not isinstance(fps, int) or fps < 1):
            raise ConfigError("features_per_split must be 'sqrt' or a positive int")

    def features_for(self, d):
        if self.features_per_split == "sqrt":
            return max(1, math.ceil(math.sqrt(d)))
        return min(int(self.features_per_split), d)

    def with_(self, **changes):
        return ForestConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class Tree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf.

    A row goes left when ``x[feature] <= threshold``.  ``value`` holds the
    class-1 fraction of the training rows reaching each node.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self):
        return self.feature.size

    def predict(self, x):
        return _forest_predict(
            self.feature, self.threshold, self.left, self.right, self.value,
            np.array([0, self.node_count], dtype=np.int64), _as32(x),
        )


def _as32(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32))


@numba.njit(cache=True)
def _forest_predict(feature, threshold, left, right, value, offsets, x):
    n = x.shape[0]
    n_trees = offsets.shape[0] - 1
    out = np.zeros(n)
    for t in range(n_trees):
        base = offsets[t]
        for i in range(n):
            node = 0
            while feature[base + node] >= 0:
                if x[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            out[i] += value[base + node]
    return out / n_trees


def _tree_from_sklearn(clf):
    t = clf.tree_
    feature = np.where(t.children_left == -1, LEAF, t.feature).astype(np.int64)
    counts = t.value[:, 0, :]
    if clf.classes_.size == 1:
        value = np.full(t.node_count, float(clf.classes_[0]))
    else:
        value = counts[:, 1] / counts.sum(axis=1)
    return Tree(
        feature,
        t.threshold.astype(np.float64),
        t.children_left.astype(np.int64),
        t.children_right.astype(np.int64),
        value.astype(np.float64),
    )


def _grow_tree(x, y, cfg, index):
    gen = streams.rng(cfg.seed, "tree", index)
    n = y.size
    rows = gen.integers(0, n, n) if cfg.bootstrap else np.arange(n)
    clf = DecisionTreeClassifier(
        criterion="gini",
        max_depth=cfg.max_depth,
        min_samples_leaf=cfg.min_leaf,
        max_features=cfg.features_for(x.shape[1]),
        random_state=int(gen.integers(0, 2**31 - 1)),
    )
    clf.fit(x[rows], y[rows])
    return _tree_from_sklearn(clf), rows


class Forest:
    """A trained, immutable forest.

    ``prior`` is the class-1 share of the training data, ``n_class0`` and
    ``n_class1`` the training sizes.  When Platt scaling is enabled the
    vote fraction ``v`` is mapped to ``sigmoid(a * logit(v) + b)``.
    """

    def __init__(self, trees, feature_count, n_class0, n_class1, config=None, platt=None):
        if not trees:
            raise DataError("a forest needs at least one tree")
        self.trees = tuple(trees)
        self.feature_count = int(feature_count)
        self.n_class0 = int(n_class0)
        self.n_class1 = int(n_class1)
        self.config = config
        self.platt = None if platt is None else (float(platt[0]), float(platt[1]))
        sizes = np.array([t.node_count for t in self.trees], dtype=np.int64)
        self._offsets = np.concatenate([[0], np.cumsum(sizes)])
        self._feature = np.concatenate([t.feature for t in self.trees])
        self._threshold = np.concatenate([t.threshold for t in self.trees])
        self._value = np.concatenate([t.value for t in self.trees])
        # children are tree-local indices; the kernel adds the tree offset
        self._left = np.concatenate([t.left for t in self.trees])
        self._right = np.concatenate([t.right for t in self.trees])
        if np.any((self._value < 0) | (self._value > 1)):
            raise DataError("leaf fractions must lie in [0, 1]")

    @property
    def prior(self):
        return self.n_class1 / (self.n_class0 + self.n_class1)

    @property
    def n_trees(self):
        return len(self.trees)

    def votes(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.feature_count:
            raise DataError(
                f"expected {self.feature_count} features, got array of shape {x.shape}"
            )
        return _forest_predict(
            self._feature, self._threshold, self._left, self._right, self._value,
            self._offsets, _as32(x),
        )

    def predict_proba(self, table):
        """Class-1 probability for every row of an EventTable or array."""
        x = table.features if hasattr(table, "features") else table
        v = self.votes(x)
        if self.platt is None:
            return v
        return _platt_apply(v, *self.platt)

    def to_dict(self):
        return {
            "format": "sigsleuth-forest",
            "version": FORMAT_VERSION,
            "feature_count": self.feature_count,
            "n_class0": self.n_class0,
            "n_class1": self.n_class1,
            "config": None if self.config is None else asdict(self.config),
            "platt": None if self.platt is None else list(self.platt),
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "value": t.value.tolist(),
                }
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != "sigsleuth-forest":
            raise DataError("not a sigsleuth forest file")
        if doc.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported forest format version {doc.get('version')}")
        trees = [
            Tree(
                np.array(t["feature"], dtype=np.int64),
                np.array(t["threshold"], dtype=np.float64),
                np.array(t["left"], dtype=np.int64),
                np.array(t["right"], dtype=np.int64),
                np.array(t["value"], dtype=np.float64),
            )
            for t in doc["trees"]
        ]
        config = ForestConfig(**doc["config"]) if doc.get("config") else None
        return cls(trees, doc["feature_count"], doc["n_class0"], doc["n_class1"], config, doc.get("platt"))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _platt_apply(v, a, b):
    v = np.clip(v, 1e-10, 1 - 1e-10)
    return 1.0 / (1.0 + np.exp(-(a * np.log(v / (1 - v)) + b)))


def _fit_platt(trees, rows_per_tree, x, y):
    """Logistic recalibration on out-of-bag vote fractions."""
    from sklearn.linear_model import LogisticRegression

    n = y.size
    total = np.zeros(n)
    count = np.zeros(n)
    for tree, rows in zip(trees, rows_per_tree):
        oob = np.ones(n, dtype=bool)
        oob[rows] = False
        if oob.any():
            total[oob] += tree.predict(x[oob])
            count[oob] += 1
    seen = count > 0
    if seen.sum() < 2 or np.unique(y[seen]).size < 2:
        raise ConfigError("Platt scaling needs out-of-bag predictions for both classes")
    v = np.clip(total[seen] / count[seen], 1e-10, 1 - 1e-10)
    lr = LogisticRegression(C=1e6)
    lr.fit(np.log(v / (1 - v))[:, None], y[seen])
    return float(lr.coef_[0, 0]), float(lr.intercept_[0])


def fit(class0, class1, cfg=None, workers=None):
    """Train a forest separating ``class0`` (label 0) from ``class1`` (label 1)."""
    cfg = cfg or ForestConfig()
    x0 = class0.features if hasattr(class0, "features") else np.asarray(class0, dtype=float)
    x1 = class1.features if hasattr(class1, "features") else np.asarray(class1, dtype=float)
    if x0.ndim != 2 or x1.ndim != 2 or x0.shape[1] != x1.shape[1]:
        raise DataError(f"feature shapes differ: {x0.shape} vs {x1.shape}")
    if x0.shape[0] == 0 or x1.shape[0] == 0:
        raise DataError("both classes need at least one row")
    x = _as32(np.vstack([x0, x1]))
    y = np.concatenate([np.zeros(x0.shape[0], dtype=np.int64), np.ones(x1.shape[0], dtype=np.int64)])
    grown = streams.parallel_map(lambda i: _grow_tree(x, y, cfg, i), range(cfg.n_trees), workers)
    trees = [g[0] for g in grown]
    platt = _fit_platt(trees, [g[1] for g in grown], x, y) if cfg.platt else None
    return Forest(trees, x.shape[1], x0.shape[0], x1.shape[0], cfg, platt)


def predict_proba(forest, table):
    return forest.predict_proba(table)
