import json

import numpy as np
import pytest

from sigsleuth import forest as fm
from sigsleuth.data import EventTable
from sigsleuth.errors import ConfigError, DataError
from sigsleuth.forest import Forest, ForestConfig, Tree, fit


def leaf(v):
    return Tree(np.array([fm.LEAF]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([v]))


def hand_traverse(tree, row):
    node = 0
    while tree.feature[node] != fm.LEAF:
        j = tree.feature[node]
        node = tree.left[node] if np.float32(row[j]) <= tree.threshold[node] else tree.right[node]
    return tree.value[node]


class TestConfig:
    @pytest.mark.parametrize("kw", [{"n_trees": 0}, {"min_leaf": 0}, {"max_depth": 0}, {"features_per_split": "log2"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ForestConfig(**kw)

    def test_sqrt_features(self):
        assert ForestConfig().features_for(5) == 3
        assert ForestConfig(features_per_split=9).features_for(4) == 4


class TestPredict:
    def test_single_leaf(self):
        f = Forest([leaf(0.3)], 2, 1, 1)
        np.testing.assert_allclose(f.predict_proba(np.zeros((4, 2))), 0.3)

    def test_mean_of_trees(self):
        f = Forest([leaf(0.2), leaf(0.6)], 1, 1, 1)
        assert f.predict_proba(np.zeros((1, 1)))[0] == pytest.approx(0.4)

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            Forest([leaf(0.5)], 2, 1, 1).predict_proba(np.zeros((3, 3)))

    def test_rejects_bad_leaf(self):
        with pytest.raises(DataError):
            Forest([leaf(1.5)], 1, 1, 1)

    def test_matches_hand_traversal(self, gen):
        x0 = gen.normal(size=(25, 2))
        x1 = gen.normal(0.8, 1, size=(25, 2))
        f = fit(x0, x1, ForestConfig(n_trees=7, min_leaf=1, seed=2))
        probe = gen.normal(size=(40, 2))
        for t in f.trees:
            oracle = [hand_traverse(t, r) for r in probe]
            np.testing.assert_array_equal(t.predict(probe), oracle)
        forest_oracle = np.mean([[hand_traverse(t, r) for r in probe] for t in f.trees], axis=0)
        np.testing.assert_allclose(f.predict_proba(probe), forest_oracle, rtol=0, atol=1e-15)

    def test_row_order_invariance(self, gen):
        f = fit(gen.normal(size=(60, 3)), gen.normal(0.5, 1, size=(60, 3)), ForestConfig(n_trees=10))
        probe = gen.normal(size=(30, 3))
        perm = gen.permutation(30)
        np.testing.assert_array_equal(f.predict_proba(probe)[perm], f.predict_proba(probe[perm]))


class TestFit:
    def test_separable(self, gen):
        x0 = -gen.uniform(0.1, 2, size=(100, 1))
        x1 = gen.uniform(0.1, 2, size=(100, 1))
        f = fit(x0, x1, ForestConfig(n_trees=30))
        assert np.all(f.predict_proba(x1) >= 0.9)

    def test_identical_classes(self, gen):
        x = gen.normal(size=(2000, 2))
        t = EventTable(x, ("a", "b"))
        f = fit(t, t, ForestConfig(n_trees=200, seed=1))
        assert abs(f.predict_proba(t).mean() - 0.5) < 0.05

    def test_prior(self, gen):
        f = fit(gen.normal(size=(30, 2)), gen.normal(size=(10, 2)), ForestConfig(n_trees=2))
        assert f.prior == pytest.approx(0.25)

    def test_same_seed_same_trees(self, gen):
        x0, x1 = gen.normal(size=(50, 2)), gen.normal(1, 1, size=(50, 2))
        a = fit(x0, x1, ForestConfig(n_trees=5, seed=3))
        b = fit(x0, x1, ForestConfig(n_trees=5, seed=3))
        assert a.to_dict() == b.to_dict()

    def test_worker_count_irrelevant(self, gen):
        x0, x1 = gen.normal(size=(50, 2)), gen.normal(1, 1, size=(50, 2))
        a = fit(x0, x1, ForestConfig(n_trees=6, seed=3), workers=1)
        b = fit(x0, x1, ForestConfig(n_trees=6, seed=3), workers=3)
        assert a.to_dict() == b.to_dict()

    def test_translation_equivariance(self, gen):
        x0 = np.round(gen.normal(size=(40, 2)), 2)
        x1 = np.round(gen.normal(0.7, 1, size=(40, 2)), 2)
        shift = np.array([8.0, 0.0])
        cfg = ForestConfig(n_trees=4, min_leaf=1, seed=5)
        a = fit(x0, x1, cfg)
        b = fit(x0 + shift, x1 + shift, cfg)
        for ta, tb in zip(a.trees, b.trees):
            np.testing.assert_array_equal(ta.feature, tb.feature)
            np.testing.assert_array_equal(ta.left, tb.left)
            np.testing.assert_array_equal(ta.value, tb.value)
            inner = ta.feature >= 0
            moved = shift[ta.feature[inner]]
            np.testing.assert_allclose(tb.threshold[inner] - ta.threshold[inner], moved, atol=1e-5)

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            fit(np.zeros((3, 2)), np.zeros((3, 3)))

    def test_empty_class(self):
        with pytest.raises(DataError):
            fit(np.zeros((0, 2)), np.zeros((3, 2)))

    def test_platt_is_monotone(self, gen):
        x0, x1 = gen.normal(size=(200, 2)), gen.normal(1, 1, size=(200, 2))
        f = fit(x0, x1, ForestConfig(n_trees=20, platt=True))
        probe = gen.normal(size=(100, 2))
        v, p = f.votes(probe), f.predict_proba(probe)
        order = np.argsort(v, kind="stable")
        assert np.all(np.diff(p[order]) >= -1e-12)


class TestSerialization:
    def test_round_trip(self, tmp_path, gen):
        f = fit(gen.normal(size=(40, 3)), gen.normal(1, 1, size=(40, 3)), ForestConfig(n_trees=4))
        p = tmp_path / "f.json"
        f.save(p)
        g = Forest.load(p)
        probe = gen.normal(size=(20, 3))
        np.testing.assert_array_equal(f.predict_proba(probe), g.predict_proba(probe))
        assert g.config == f.config and g.prior == f.prior

    def test_rejects_foreign_json(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text(json.dumps({"format": "other"}))
        with pytest.raises(DataError):
            Forest.load(p)
