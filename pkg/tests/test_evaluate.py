"""Frozen-feature extraction, linear probe, few-shot protocol, masking
baselines, and mask export."""

import numpy as np
import pytest

from admask import dataio, evaluate, geometry
from admask.geometry import PointCloud
from admask.model import init_params
from admask.trainer import stream

from test_trainer import tiny_config


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_config()
    params = init_params(cfg.model_config(), stream(0, "init"))
    rng = np.random.default_rng(0)
    clouds = [dataio.gen_synthetic("sphere", 96, 0.02, rng) for _ in range(3)]
    return cfg, params, clouds


# ---------------------------------------------------------------------------
# feature extraction


def test_features_deterministic_and_right_width(setup):
    cfg, params, clouds = setup
    a = evaluate.extract_features(clouds, params, cfg)
    b = evaluate.extract_features(clouds, params, cfg)
    assert a.shape == (3, 2 * cfg.embed_dim)
    assert np.array_equal(a, b)


def test_features_scale_sensitive_but_permutation_invariant(setup):
    cfg, params, clouds = setup
    cloud = clouds[0]
    base = evaluate.extract_features([cloud], params, cfg)[0]

    scaled = PointCloud(0.5 * cloud.points)
    f_scaled = evaluate.extract_features([scaled], params, cfg)[0]
    assert not np.allclose(base, f_scaled, atol=1e-4)

    perm = np.random.default_rng(1).permutation(cloud.n)
    shuffled = PointCloud(cloud.points[perm])
    f_perm = evaluate.extract_features([shuffled], params, cfg)[0]
    np.testing.assert_allclose(base, f_perm, atol=1e-5)


def test_standardize_uses_train_stats_only():
    rng = np.random.default_rng(2)
    train = rng.normal(3.0, 2.0, size=(50, 8))
    test = rng.normal(-1.0, 0.5, size=(20, 8))
    z_train = evaluate.standardize(train, train)
    z_test = evaluate.standardize(train, test)
    np.testing.assert_allclose(z_train.mean(axis=0), 0.0, atol=1e-7)
    np.testing.assert_allclose(z_train.std(axis=0), 1.0, atol=1e-6)
    # test stats are NOT zero-mean: standardization came from the train split
    assert np.abs(z_test.mean(axis=0)).min() > 0.5


# ---------------------------------------------------------------------------
# linear probe


def _blobs(rng, n_per_class, n_classes, d=6, sep=4.0):
    feats, labels = [], []
    for c in range(n_classes):
        center = rng.normal(size=d) * sep
        feats.append(center + rng.normal(size=(n_per_class, d)))
        labels += [c] * n_per_class
    return np.concatenate(feats), np.asarray(labels)


def test_probe_separable_data_is_perfect():
    rng = np.random.default_rng(3)
    X, y = _blobs(rng, 40, 2, sep=8.0)
    res = evaluate.linear_probe(X[::2], y[::2], X[1::2], y[1::2], n_seeds=3)
    assert res.accuracy_mean == 1.0
    assert res.confusion.sum() == len(y[1::2])
    assert np.array_equal(res.confusion.sum(axis=1),
                          np.bincount(y[1::2], minlength=2))


def test_probe_shuffled_labels_is_chance_level():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(400, 10))
    y = np.repeat(np.arange(4), 100)
    rng.shuffle(y)
    res = evaluate.linear_probe(X[:300], y[:300], X[300:], y[300:], n_seeds=10)
    assert abs(res.accuracy_mean - 0.25) < 0.08


def test_probe_train_accuracy_sanity():
    rng = np.random.default_rng(5)
    X, y = _blobs(rng, 30, 3, sep=6.0)
    res = evaluate.linear_probe(X, y, X, y, n_seeds=2, l2=1e-4)
    assert res.accuracy_mean >= 0.99


def test_probe_rejects_single_class():
    X = np.random.default_rng(6).normal(size=(10, 4))
    with pytest.raises(ValueError):
        evaluate.linear_probe(X, np.zeros(10, dtype=int), X,
                              np.zeros(10, dtype=int))


# ---------------------------------------------------------------------------
# few-shot episodes


def test_fewshot_one_way_is_trivially_perfect():
    rng = np.random.default_rng(7)
    X, y = _blobs(rng, 40, 3)
    mean, std, accs, _ = evaluate.fewshot_eval(X, y, way=1, shot=5, n_folds=4)
    assert mean == 1.0 and std == 0.0


def test_fewshot_reproducible_folds():
    rng = np.random.default_rng(8)
    X, y = _blobs(rng, 40, 4)
    _, _, _, eps_a = evaluate.fewshot_eval(X, y, 3, 5, n_folds=5, seed=11)
    _, _, _, eps_b = evaluate.fewshot_eval(X, y, 3, 5, n_folds=5, seed=11)
    for a, b in zip(eps_a, eps_b):
        assert np.array_equal(a.support, b.support)
        assert np.array_equal(a.query, b.query)


def test_fewshot_folds_pairwise_distinct():
    rng = np.random.default_rng(9)
    X, y = _blobs(rng, 40, 4)
    _, _, _, eps = evaluate.fewshot_eval(X, y, 3, 5, n_folds=10)
    supports = [tuple(sorted(e.support)) for e in eps]
    assert len(set(supports)) == 10


def test_fewshot_on_separated_blobs():
    rng = np.random.default_rng(10)
    X, y = _blobs(rng, 40, 4, sep=6.0)
    mean, _, _, _ = evaluate.fewshot_eval(X, y, way=4, shot=10, n_folds=5)
    assert mean > 0.9


def test_fewshot_episode_invariants():
    rng = np.random.default_rng(11)
    X, y = _blobs(rng, 40, 4)
    ep = evaluate.sample_episode(y, way=3, shot=5, query_per_class=10,
                                 rng=np.random.default_rng(0))
    assert len(ep.support) == 15 and len(ep.query) == 30
    assert not (set(ep.support) & set(ep.query))
    assert len(np.unique(y[ep.support])) == 3


def test_fewshot_insufficient_population():
    y = np.array([0] * 3 + [1] * 20)
    with pytest.raises(ValueError, match="episode needs"):
        evaluate.sample_episode(y, way=2, shot=5, query_per_class=10,
                                rng=np.random.default_rng(0))


# ---------------------------------------------------------------------------
# baseline masks


def test_random_mask_exact_count():
    rng = np.random.default_rng(12)
    for _ in range(50):
        m = evaluate.baseline_masks("random", 64, (0.10, 0.45), rng)
        count = int(m.sum())
        assert 7 <= count <= 29  # ceil(0.10*64) .. ceil(0.45*64)
        assert set(np.unique(m)) <= {0.0, 1.0}


def test_random_mask_uniform_coverage():
    rng = np.random.default_rng(13)
    p = 16
    hits = np.zeros(p)
    n_draws = 10000
    for _ in range(n_draws):
        hits += evaluate.baseline_masks("random", p, (0.3, 0.3), rng)
    freq = hits / hits.sum()
    # every patch within 5% (relative) of the uniform frequency
    assert np.abs(freq - 1.0 / p).max() < 0.05 / p


def test_block_mask_is_nearest_ball():
    rng = np.random.default_rng(14)
    centers = np.random.default_rng(15).normal(size=(32, 3))
    m = evaluate.baseline_masks("block", 32, (0.25, 0.25), rng,
                                centers=centers)
    count = int(m.sum())
    assert count == 8
    # the masked set must be the k nearest patches to some anchor
    masked = np.flatnonzero(m)
    ok = False
    for anchor in masked:
        d = np.linalg.norm(centers - centers[anchor], axis=1)
        if set(np.argsort(d, kind="stable")[:count]) == set(masked):
            ok = True
            break
    assert ok


def test_block_mask_needs_centers():
    with pytest.raises(ValueError, match="centers"):
        evaluate.baseline_masks("block", 16, (0.2, 0.3),
                                np.random.default_rng(0))


def test_baseline_masks_validate_ratio_and_kind():
    rng = np.random.default_rng(16)
    with pytest.raises(ValueError):
        evaluate.baseline_masks("random", 16, (0.0, 0.3), rng)
    with pytest.raises(ValueError):
        evaluate.baseline_masks("random", 16, (0.2, 1.0), rng)
    with pytest.raises(ValueError):
        evaluate.baseline_masks("checker", 16, (0.2, 0.3), rng)


# ---------------------------------------------------------------------------
# mask export


def test_export_masks_partition(tmp_path, setup):
    cfg, params, clouds = setup
    prefix = str(tmp_path / "viz")
    paths, patch_assign, point_assign = evaluate.export_masks(
        clouds[0], params, cfg, prefix)
    assert len(paths) == cfg.n_masks + 1
    for path in paths:
        cloud, ids = dataio.read_cloud(path)
        assert cloud.n >= 1
    _, ids = dataio.read_cloud(paths[-1])
    assert ids is not None
    assert set(np.unique(ids)) <= set(range(cfg.n_masks))
    assert set(np.unique(patch_assign)) <= set(range(cfg.n_masks))
    # argmax assignment is total: every patch belongs to exactly one mask
    assert patch_assign.shape == (cfg.patches_global,)
