import math

import numpy as np
import pytest

from failpred import baselines as bl
from failpred.classifier import ClassifierSpec, TrainConfig, TrainedClassifier, train_classifier
from failpred.criteria import entropy_confidence
from failpred.datapipe import synth_blobs
from failpred.errors import ConfigError, DimensionError, FitError, LabelError
from oracles import all_pairs_nearest, trustscore_oracle


@pytest.fixture(scope="module")
def model():
    data = synth_blobs(3, 80, 2, 1.0, seed=0)
    spec = ClassifierSpec("mlp", (2,), 3, hidden=(16,), dropout_rate=0.3)
    return train_classifier(spec, data, TrainConfig(epochs=5, batch_size=32), seed=0), data


# MC dropout


def test_mc_rate_zero_single_pass_is_entropy_of_predict():
    spec = ClassifierSpec("mlp", (2,), 3, hidden=(8,), dropout_rate=0.0)
    m = TrainedClassifier.initialise(spec, 1)
    x = np.random.default_rng(0).standard_normal((10, 2))
    got = bl.mcdropout_confidence(m, x, bl.McDropoutConfig(samples=1))
    np.testing.assert_array_equal(got, entropy_confidence(m.predict(x).probs))


def test_mc_mean_is_distribution_and_seeded(model):
    m, data = model
    cfg = bl.McDropoutConfig(samples=25, seed=3)
    mean = bl.mc_mean_distribution(m, data.features, cfg)
    np.testing.assert_allclose(mean.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(mean, bl.mc_mean_distribution(m, data.features, cfg))
    other = bl.mc_mean_distribution(m, data.features, bl.McDropoutConfig(25, seed=4))
    assert not np.array_equal(mean, other)


def test_mc_batching_does_not_change_scores(model):
    m, data = model
    cfg = bl.McDropoutConfig(samples=5, seed=0)
    whole = bl.mc_mean_distribution(m, data.features[:30], cfg, batch_size=4096)
    # different batch sizes consume the generator in a different order, so
    # compare distributions rather than bits: both are valid and close to predict()
    parts = bl.mc_mean_distribution(m, data.features[:30], cfg, batch_size=7)
    assert whole.shape == parts.shape
    np.testing.assert_allclose(parts.sum(axis=1), 1.0, atol=1e-12)


def test_mc_variance_shrinks_with_samples(model):
    m, data = model
    x = data.features[:1]
    spread = {}
    for t in (10, 100):
        scores = [bl.mcdropout_confidence(m, x, bl.McDropoutConfig(t, seed=s))[0] for s in range(30)]
        spread[t] = np.var(scores)
    assert spread[100] < spread[10]


def test_mc_requires_dropout_layer():
    spec = ClassifierSpec("mlp", (2,), 3, hidden=(8,))
    m = TrainedClassifier.initialise(spec, 0)
    m.encoder.layers.pop()  # drop the trailing Dropout
    with pytest.raises(ConfigError):
        bl.mcdropout_confidence(m, np.zeros((1, 2)))
    with pytest.raises(ConfigError):
        bl.McDropoutConfig(samples=0)


# nearest neighbours


@pytest.mark.parametrize("seed", range(5))
def test_brute_force_nn_matches_all_pairs(seed):
    rng = np.random.default_rng(seed)
    pts, qs = rng.standard_normal((60, 3)), rng.standard_normal((25, 3))
    np.testing.assert_allclose(bl.brute_force_nn(pts, qs), all_pairs_nearest(pts, qs), rtol=0, atol=1e-12)


def test_brute_force_nn_exact_on_far_offset_points():
    # large common offset: the expanded |a|^2 + |b|^2 - 2ab form alone loses the digits
    pts = 1e6 + np.array([[0.0, 0.0], [3.0, 4.0]])
    q = 1e6 + np.array([[0.0, 1e-3]])
    assert bl.brute_force_nn(pts, q)[0] == pytest.approx(1e-3, rel=1e-6)


# TrustScore


def test_trustscore_stated_distances():
    index = bl.TrustScoreIndex([np.array([[1.0, 0.0]]), np.array([[-4.0, 0.0]]), np.array([[0.0, 4.0]])])
    assert bl.trustscore(index, np.zeros((1, 2)), np.array([0]))[0] == 4.0


def test_trustscore_two_clusters():
    rng = np.random.default_rng(0)
    near = np.c_[np.zeros(20), rng.standard_normal(20)]
    far = np.c_[np.full(20, 10.0), rng.standard_normal(20)]
    feats = np.r_[near, far]
    labels = np.r_[np.zeros(20), np.ones(20)]
    index = bl.trustscore_fit(feats, labels, k=5, alpha=0.0, backend="brute")
    # query on the same vertical line as a cluster point of each class
    q = np.array([[2.0, near[0, 1]]])
    far[:, 1] = near[0, 1]
    index = bl.trustscore_fit(np.r_[near, far], labels, k=5, backend="kdtree")
    assert bl.trustscore(index, q, np.array([0]))[0] == 4.0


def test_trustscore_on_a_training_point_is_finite():
    index = bl.TrustScoreIndex([np.array([[0.0, 0.0]]), np.array([[3.0, 0.0]])])
    s = bl.trustscore(index, np.array([[0.0, 0.0]]), np.array([0]))[0]
    assert math.isfinite(s) and s == 3.0 / 1e-12


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("backend", ["kdtree", "brute"])
def test_trustscore_matches_all_pairs_oracle(seed, backend):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    dim = int(rng.integers(1, 6))
    feats = rng.standard_normal((200, dim)) * rng.uniform(0.1, 5)
    labels = rng.integers(0, k, 200)
    labels[:k] = np.arange(k)
    queries = rng.standard_normal((40, dim))
    predicted = rng.integers(0, k, 40)
    index = bl.trustscore_fit(feats, labels, num_classes=k, backend=backend)
    want = trustscore_oracle([feats[labels == c] for c in range(k)], queries, predicted)
    got = bl.trustscore(index, queries, predicted)
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_filtering_sizes_and_alpha_zero():
    rng = np.random.default_rng(1)
    feats = rng.standard_normal((103, 2))
    labels = np.r_[np.zeros(50), np.ones(53)].astype(int)
    full = bl.trustscore_fit(feats, labels, k=3, alpha=0.0)
    assert [len(p) for p in full.class_points] == [50, 53]
    for alpha in (0.1, 0.25, 0.5):
        idx = bl.trustscore_fit(feats, labels, k=3, alpha=alpha)
        assert [len(p) for p in idx.class_points] == [math.ceil((1 - alpha) * 50), math.ceil((1 - alpha) * 53)]


def test_filtering_removes_the_outlier():
    rng = np.random.default_rng(2)
    cluster = rng.standard_normal((19, 2)) * 0.1
    outlier = np.array([[50.0, 50.0]])
    feats = np.r_[cluster, outlier, rng.standard_normal((20, 2)) * 0.1 + 5]
    labels = np.r_[np.zeros(20), np.ones(20)].astype(int)
    idx = bl.trustscore_fit(feats, labels, k=3, alpha=0.05)
    assert len(idx.class_points[0]) == 19
    assert not np.any(np.all(idx.class_points[0] == outlier, axis=1))


def test_fit_and_query_errors():
    feats = np.zeros((6, 2))
    with pytest.raises(FitError):
        bl.trustscore_fit(feats, np.array([0, 0, 0, 2, 2, 2]), num_classes=3)
    with pytest.raises(FitError):
        bl.trustscore_fit(feats, np.array([0, 0, 0, 1, 1, 1]), k=5, alpha=0.1)
    with pytest.raises(ConfigError):
        bl.trustscore_fit(feats, np.array([0, 0, 0, 1, 1, 1]), alpha=1.0)
    with pytest.raises(DimensionError):
        bl.trustscore_fit(feats, np.array([0, 1]))
    index = bl.trustscore_fit(np.eye(4)[:, :2], np.array([0, 0, 1, 1]))
    with pytest.raises(LabelError):
        bl.trustscore(index, np.zeros((1, 2)), np.array([2]))
    with pytest.raises(DimensionError):
        bl.trustscore(index, np.zeros((1, 3)), np.array([0]))
    with pytest.raises(ConfigError):
        bl.trustscore_fit(np.eye(4)[:, :2], np.array([0, 0, 1, 1]), backend="annoy")
