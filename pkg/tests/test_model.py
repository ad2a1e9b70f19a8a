import json
import math

import numpy as np
import pytest

from memfail.features import FEATURE_NAMES, Dataset, FeatureVector, manifest_hash
from memfail.model import (
    Hyperparams, ManifestMismatchError, Tree, TreeEnsemble, classify, predict_proba, train,
)


def dataset(n=600, seed=0, noise=0.1):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 56))
    X[:, 5] = rng.integers(0, 4, n)  # a discrete column
    logit = 2 * X[:, 0] - X[:, 3] + 1.5 * (X[:, 5] == 2)
    y = (logit + noise * rng.normal(size=n) > 0.5).astype(np.int8)
    return Dataset(X, [f"D{i}" for i in range(n)], np.arange(n) + 1, y)


def leaf(value):
    return Tree([-1], [0.0], [-1], [-1], [value], [0.0])


def ensemble(trees, base=0.0, mode="boosted"):
    return TreeEnsemble(mode, trees, 0.1, base, list(FEATURE_NAMES), manifest_hash())


def test_planted_separable_fits_within_10_trees():
    rng = np.random.default_rng(1)
    X = np.zeros((500, 56))
    X[:, 7] = rng.uniform(0, 10, 500)
    y = (X[:, 7] > 4).astype(np.int8)
    ds = Dataset(X, ["D"] * 500, np.arange(500) + 1, y)
    m = train(ds, Hyperparams(n_trees=10, feature_subsample=1.0, learning_rate=1.0, min_samples_leaf=1))
    assert ((m.predict_proba(X) >= 0.5) == y).all()
    m = train(ds, Hyperparams(n_trees=10, feature_subsample=1.0))
    assert ((m.predict_proba(X) >= 0.5) == y).all()


def test_deterministic_serialization():
    ds = dataset()
    hp = Hyperparams(n_trees=20, seed=5)
    assert train(ds, hp).dumps() == train(ds, hp).dumps()
    assert train(ds, hp).dumps() != train(ds, Hyperparams(n_trees=20, seed=6)).dumps()


@pytest.mark.parametrize("mode", ["boosted", "forest"])
def test_sample_order_does_not_matter(mode):
    ds = dataset(seed=2)
    perm = np.random.default_rng(0).permutation(len(ds))
    hp = Hyperparams(n_trees=15, mode=mode, seed=1)
    a = train(ds, hp)
    b = train(ds.subset(perm), hp)
    X = dataset(200, seed=9).X
    assert np.array_equal(a.predict_proba(X), b.predict_proba(X))


def test_zero_tree_models():
    m = ensemble([], base=0.7)
    assert np.allclose(m.predict_proba(np.zeros((3, 56))), 1 / (1 + math.exp(-0.7)))
    assert ensemble([leaf(0.0)]).predict_proba(np.zeros((1, 56)))[0] == 0.5


def walk(tree_json, x):
    i = 0
    while tree_json["feature"][i] >= 0:
        f = tree_json["feature"][i]
        i = tree_json["left"][i] if x[f] <= tree_json["threshold"][i] else tree_json["right"][i]
    return tree_json["value"][i]


@pytest.mark.parametrize("mode", ["boosted", "forest"])
def test_predictions_match_interpreter(mode):
    m = train(dataset(seed=3), Hyperparams(n_trees=25, mode=mode, seed=2))
    lines = m.dumps().splitlines()
    head = json.loads(lines[0])
    trees = [json.loads(ln) for ln in lines[1:]]
    X = np.random.default_rng(7).normal(size=(1000, 56))
    X[::3, 5] = 2.0
    got = m.predict_proba(X)
    for x, g in zip(X, got):
        raw = sum(walk(t, x) for t in trees)
        if mode == "boosted":
            want = 1 / (1 + math.exp(-(raw + head["base_score"])))
        else:
            want = min(1.0, max(0.0, raw / len(trees)))
        assert abs(g - want) < 1e-12


def test_log_loss_non_increasing():
    losses = []
    train(dataset(seed=4, noise=1.0), Hyperparams(n_trees=40, seed=0), log_losses=losses)
    assert len(losses) == 41
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_structure_limits_and_thresholds_observed():
    ds = dataset(seed=5)
    m = train(ds, Hyperparams(n_trees=10, max_depth=3, min_samples_leaf=30))
    for t in m.trees:
        assert t.depth() <= 3
        for f, thr in zip(t.feature, t.threshold):
            if f >= 0:
                assert thr in set(ds.X[:, f].tolist())
    for t in m.trees:
        vals, inv = np.unique(t.apply(ds.X), return_inverse=True)
        assert np.bincount(inv).min() >= 30 or len(vals) == 1


def test_forest_scores_are_probabilities():
    m = train(dataset(seed=6), Hyperparams(n_trees=10, mode="forest"))
    p = m.predict_proba(np.random.default_rng(1).normal(size=(300, 56)) * 5)
    assert ((p >= 0) & (p <= 1)).all()


def test_save_load_round_trip(tmp_path):
    m = train(dataset(seed=7), Hyperparams(n_trees=8), meta={"seed": 1})
    path = tmp_path / "m.jsonl"
    m.save(path)
    back = TreeEnsemble.load(path)
    assert back.dumps() == m.dumps() and back.meta == {"seed": 1}
    X = dataset(50, seed=8).X
    assert np.array_equal(back.predict_proba(X), m.predict_proba(X))
    with pytest.raises(ValueError):
        TreeEnsemble.loads("")
    with pytest.raises(ValueError):
        TreeEnsemble.loads(m.dumps().splitlines()[0] + "\n")


def test_manifest_checked():
    m = train(dataset(seed=7), Hyperparams(n_trees=3))
    with pytest.raises(ManifestMismatchError):
        m.predict_proba(np.zeros((1, 56)), names=list(reversed(FEATURE_NAMES)))
    with pytest.raises(ManifestMismatchError):
        m.predict_proba(np.zeros((1, 55)))


def test_train_needs_both_classes():
    ds = dataset()
    ds.y[:] = 0
    with pytest.raises(ValueError):
        train(ds, Hyperparams(n_trees=2))


def test_hyperparam_validation():
    for bad in ({"mode": "dart"}, {"n_trees": 0}, {"learning_rate": 0}, {"feature_subsample": 1.5},
                {"n_bins": 300}, {"reg_lambda": -1}):
        with pytest.raises(ValueError):
            Hyperparams(**bad)


def fixed(p):
    return ensemble([leaf(p)], mode="forest")


def test_classify_threshold_boundary():
    zeros = FeatureVector("D", 1, tuple([0.0] * 56))
    assert predict_proba(fixed(0.29), zeros) == 0.29
    assert classify(fixed(0.29), zeros) == 0
    assert classify(fixed(0.30), zeros) == 1
    assert classify(fixed(0.0), zeros, threshold=0.0) == 1
    assert classify(fixed(0.999), zeros, threshold=1.0) == 0
    assert classify(fixed(0.3), np.zeros((4, 56))).tolist() == [1, 1, 1, 1]
    with pytest.raises(ValueError):
        classify(fixed(0.3), zeros, threshold=1.5)
