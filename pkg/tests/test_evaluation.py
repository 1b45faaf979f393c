import dataclasses

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from coffeelab.datagen import build_clean_set, build_finetune_set, build_pretrain_corpus, stack
from coffeelab.evaluation import (
    FeatureExtractor, FeatureTrainingError, auc, frechet_distance, inception_score, is_analog, mcs_analog,
    presence_rate, score, train_feature_extractor,
)


def scipy_frechet(f1, f2, reg=1e-6):
    mu1, mu2 = f1.mean(0), f2.mean(0)
    s1 = np.cov(f1, rowvar=False) + reg * np.eye(f1.shape[1])
    s2 = np.cov(f2, rowvar=False) + reg * np.eye(f1.shape[1])
    covmean = scipy.linalg.sqrtm(s1 @ s2).real
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(s1 + s2 - 2 * covmean))


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_frechet_matches_scipy_oracle(seed, d):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(60, d)) @ rng.normal(size=(d, d))
    b = rng.normal(size=(50, d)) * 2 + 1
    assert frechet_distance(a, b) == pytest.approx(scipy_frechet(a, b), rel=1e-5, abs=1e-6)


def test_frechet_mean_shift_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(200, 4))
    shift = np.array([3.0, 0.0, -4.0, 0.0])
    assert frechet_distance(a, a + shift) == pytest.approx(25.0, rel=1e-6)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-6)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_frechet_symmetric_and_non_negative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(40, 5)), rng.normal(size=(45, 5)) * 0.5
    assert frechet_distance(a, b) >= 0
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-6, abs=1e-9)


def test_frechet_needs_enough_samples():
    with pytest.raises(ValueError, match="33"):
        frechet_distance(np.zeros((10, 3)), np.zeros((40, 3)))


def test_inception_score_bounds():
    same = np.tile([0.7, 0.1, 0.1, 0.1], (20, 1))
    assert inception_score(same) == pytest.approx(1.0)
    onehot = np.repeat(np.eye(4), 5, axis=0)
    assert inception_score(onehot) == pytest.approx(4.0)


@given(st.integers(0, 2**32 - 1))
def test_inception_score_in_range(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(4), size=16)
    assert 1.0 - 1e-9 <= inception_score(p) <= 4.0 + 1e-9


def test_auc_examples():
    assert auc(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1])) == 1.0
    assert auc(np.array([0.9, 0.8, 0.2, 0.1]), np.array([0, 0, 1, 1])) == 0.0
    assert auc(np.array([0.5, 0.5, 0.5, 0.5]), np.array([0, 1, 0, 1])) == 0.5
    assert auc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1])) == 0.75
    with pytest.raises(ValueError):
        auc(np.array([1.0, 2.0]), np.array([1, 1]))


def test_empty_and_small_sample_sets_raise():
    fx = FeatureExtractor.init(0)
    with pytest.raises(ValueError, match="empty"):
        presence_rate(np.zeros((0, 256)), "frame", fx)
    with pytest.raises(ValueError, match="16"):
        is_analog(np.zeros((4, 256)), fx)


def test_prototype_needs_both_sides():
    fx = FeatureExtractor.init(0)
    with pytest.raises(ValueError, match="with and without"):
        mcs_analog(np.zeros((2, 256)), "frame", fx, refset=build_finetune_set("circle", "frame", 60))


def test_feature_training_is_deterministic():
    corpus = build_pretrain_corpus(320, 0)
    kw = dict(steps=30, min_acc=0.0, min_auc=0.0)
    a, ra = train_feature_extractor(corpus, 3, **kw)
    b, rb = train_feature_extractor(corpus, 3, **kw)
    assert ra == rb
    for p, q in zip(a.params(), b.params()):
        np.testing.assert_array_equal(p.data, q.data)


def test_shuffled_labels_fail_the_quality_gate():
    corpus = build_pretrain_corpus(320, 0)
    perm = np.random.default_rng(0).permutation(len(corpus))
    shuffled = [dataclasses.replace(im, base=corpus[j].base, attributes=corpus[j].attributes)
                for im, j in zip(corpus, perm)]
    with pytest.raises(FeatureTrainingError, match="held-out accuracy"):
        train_feature_extractor(shuffled, 0, steps=300)


# --- with the trained feature extractor -------------------------------------

def test_feature_extractor_quality(assets):
    held = build_pretrain_corpus(320, 99)
    acc, aucs = score(assets.fx, held)
    assert acc >= 0.98 and min(aucs) >= 0.99


@pytest.mark.parametrize("base,attr", [("circle", "frame"), ("cross", "checker")])
def test_metrics_separate_attribute_from_clean(assets, base, attr):
    fx = assets.fx
    with_attr = stack(build_finetune_set(base, attr, 64, seed=11))
    clean = stack(build_clean_set(base, 64, seed=11))
    proto = assets.prototypes[attr]
    assert mcs_analog(with_attr, attr, fx, prototype=proto) - mcs_analog(clean, attr, fx, prototype=proto) >= 0.2
    assert presence_rate(with_attr, attr, fx) >= 0.95
    assert presence_rate(clean, attr, fx) <= 0.05
