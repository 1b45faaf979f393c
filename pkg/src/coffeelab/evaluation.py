"""Frozen feature extractor and the metrics computed on top of it:
attribute-direction cosine (MCS analog), attribute presence rate, a 4-class
Inception-Score analog and a Frechet feature distance."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .datagen import ATTRIBUTES, BASES, N_PIX, LabeledImage, stack

LOGIT_TARGET = 4.0
FEATURE_DIM = 32
MIN_REF_PER_SIDE = 50
MIN_IS_SAMPLES = 16
MIN_FFD_SAMPLES = 33


class FeatureTrainingError(RuntimeError):
    pass


class FeatureExtractor:
    """image [256] -> 64 -> feature [32] -> base logits [4], attribute logits [4]."""

    def __init__(self, weights: Sequence[np.ndarray], bases=BASES, attributes=ATTRIBUTES):
        self.layers = [ad.param(w) for w in weights]
        self.bases = tuple(bases)
        self.attributes = tuple(attributes)

    @classmethod
    def init(cls, seed: int, hidden: int = 64, bases=BASES, attributes=ATTRIBUTES) -> "FeatureExtractor":
        rng = np.random.default_rng(seed)
        shapes = [(N_PIX, hidden), (hidden, FEATURE_DIM),
                  (FEATURE_DIM, len(bases)), (FEATURE_DIM, len(attributes))]
        ws = []
        for i, o in shapes:
            ws += [(rng.standard_normal((i, o)) / np.sqrt(i)).astype(np.float32), np.zeros(o, np.float32)]
        return cls(ws, bases, attributes)

    def params(self):
        return list(self.layers)

    def _forward(self, x):
        w1, b1, w2, b2, wb, bb, wa, ba = self.layers
        h = ad.silu(ad.add(ad.matmul(x, w1), b1))
        f = ad.silu(ad.add(ad.matmul(h, w2), b2))
        return f, ad.add(ad.matmul(f, wb), bb), ad.add(ad.matmul(f, wa), ba)

    def __call__(self, pixels: np.ndarray):
        """(features, base logits, attribute logits) as numpy arrays."""
        x = ad.const(np.atleast_2d(np.asarray(pixels, np.float32)))
        f, lb, la = self._forward(x)
        return f.data, lb.data, la.data

    def features(self, pixels) -> np.ndarray:
        return self(pixels)[0]

    def base_probs(self, pixels) -> np.ndarray:
        logits = self(pixels)[1].astype(np.float64)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def attribute_logits(self, pixels) -> np.ndarray:
        return self(pixels)[2]


def _labels(images: Sequence[LabeledImage], bases, attributes):
    base = np.array([bases.index(im.base) for im in images])
    attr = np.array([[a in im.attributes for a in attributes] for im in images], dtype=bool)
    return base, attr


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    labels = np.asarray(labels, bool)
    npos, nneg = labels.sum(), (~labels).sum()
    if npos == 0 or nneg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    s = np.asarray(scores)[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1
        i = j + 1
    return float((ranks[labels].sum() - npos * (npos + 1) / 2) / (npos * nneg))


@dataclass
class FXReport:
    train_acc: float
    heldout_acc: float
    heldout_auc: list = field(default_factory=list)


def score(fx: FeatureExtractor, images: Sequence[LabeledImage]) -> tuple[float, list[float]]:
    base, attr = _labels(images, fx.bases, fx.attributes)
    _, lb, la = fx(stack(images))
    acc = float((lb.argmax(1) == base).mean())
    aucs = [auc(la[:, k], attr[:, k]) for k in range(len(fx.attributes))]
    return acc, aucs


def train_feature_extractor(corpus: Sequence[LabeledImage], seed: int, steps: int = 3000,
                            batch_size: int = 128, lr: float = 3e-3, heldout_frac: float = 0.2,
                            noise_std: float = 0.05, min_acc: float = 0.98,
                            min_auc: float = 0.99) -> tuple[FeatureExtractor, FXReport]:
    """Supervised training by regressing logits onto +/-4 targets (the op set
    has no softmax). Raises FeatureTrainingError if the held-out accuracy or
    any attribute AUC misses its target."""
    ss = np.random.SeedSequence([seed, 7])
    s_init, s_split, s_data = ss.spawn(3)
    fx = FeatureExtractor.init(int(s_init.generate_state(1)[0]))
    perm = np.random.default_rng(s_split).permutation(len(corpus))
    n_hold = max(1, int(len(corpus) * heldout_frac))
    hold = [corpus[i] for i in perm[:n_hold]]
    train = [corpus[i] for i in perm[n_hold:]]
    X = stack(train)
    base, attr = _labels(train, fx.bases, fx.attributes)
    tb = np.full((len(train), len(fx.bases)), -LOGIT_TARGET, np.float32)
    tb[np.arange(len(train)), base] = LOGIT_TARGET
    ta = np.where(attr, LOGIT_TARGET, -LOGIT_TARGET).astype(np.float32)

    rng = np.random.default_rng(s_data)
    params = fx.params()
    states = ad.make_states(params, lr=lr, weight_decay=0.0)
    for _ in range(steps):
        idx = rng.integers(0, len(train), batch_size)
        x = X[idx]
        if noise_std:
            x = x + rng.normal(0.0, noise_std, x.shape).astype(np.float32)
        ad.zero_grads(params)
        with Graph() as g:
            _, lb, la = fx._forward(ad.const(x))
            loss = ad.add(ad.mse(lb, ad.const(tb[idx])), ad.mse(la, ad.const(ta[idx])))
            g.backward(loss)
        ad.adamw_step(params, states)
    ad.zero_grads(params)
    for p in params:
        p.requires_grad = False

    train_acc, _ = score(fx, train)
    acc, aucs = score(fx, hold)
    report = FXReport(train_acc, acc, aucs)
    if acc < min_acc or min(aucs) < min_auc:
        raise FeatureTrainingError(
            f"feature extractor failed: held-out accuracy {acc:.3f} (need {min_acc}), "
            f"attribute AUCs {[round(a, 3) for a in aucs]} (need {min_auc})")
    return fx, report


# --- metrics ---------------------------------------------------------------

def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, np.float64)
    return x / (np.linalg.norm(x, axis=-1, keepdims=True) + 1e-12)


def attribute_prototype(refset: Sequence[LabeledImage], attribute: str, fx: FeatureExtractor) -> np.ndarray:
    pos = [im for im in refset if attribute in im.attributes]
    neg = [im for im in refset if attribute not in im.attributes]
    if len(pos) < MIN_REF_PER_SIDE or len(neg) < MIN_REF_PER_SIDE:
        raise ValueError(f"reference set needs >= {MIN_REF_PER_SIDE} images with and without "
                         f"{attribute!r}; got {len(pos)} and {len(neg)}")
    p = _unit(fx.features(stack(pos))).mean(0) - _unit(fx.features(stack(neg))).mean(0)
    return _unit(p)


def mcs_analog(samples: np.ndarray, attribute: str, fx: FeatureExtractor,
               refset: Sequence[LabeledImage] | None = None, prototype: np.ndarray | None = None) -> float:
    """Mean cosine between sample features and the attribute contrast direction."""
    if prototype is None:
        prototype = attribute_prototype(refset, attribute, fx)
    f = _unit(fx.features(samples))
    return float(np.mean(f @ prototype))


def presence_rate(samples: np.ndarray, attribute: str, fx: FeatureExtractor) -> float:
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise ValueError("presence rate of an empty sample set is undefined")
    k = fx.attributes.index(attribute)
    return float(np.mean(fx.attribute_logits(samples)[:, k] > 0.0))


def inception_score(probs: np.ndarray) -> float:
    p = np.asarray(probs, np.float64)
    marg = p.mean(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = np.where(p > 0, p * (np.log(p) - np.log(marg)), 0.0).sum(1)
    return float(np.exp(kl.mean()))


def is_analog(samples: np.ndarray, fx: FeatureExtractor) -> float:
    if len(samples) < MIN_IS_SAMPLES:
        raise ValueError(f"IS analog needs >= {MIN_IS_SAMPLES} samples, got {len(samples)}")
    return inception_score(fx.base_probs(samples))


def _sqrtm_trace(s1: np.ndarray, s2: np.ndarray) -> float:
    """tr((s1 s2)^{1/2}) through the symmetric form s1^{1/2} s2 s1^{1/2}."""
    w, q = np.linalg.eigh(s1)
    r1 = (q * np.sqrt(np.clip(w, 0, None))) @ q.T
    m = r1 @ s2 @ r1
    m = 0.5 * (m + m.T)
    return float(np.sqrt(np.clip(np.linalg.eigvalsh(m), 0, None)).sum())


def frechet_distance(f1: np.ndarray, f2: np.ndarray, reg: float = 1e-6) -> float:
    f1 = np.asarray(f1, np.float64)
    f2 = np.asarray(f2, np.float64)
    for f in (f1, f2):
        if len(f) < MIN_FFD_SAMPLES:
            raise ValueError(f"Frechet distance needs >= {MIN_FFD_SAMPLES} samples per side, got {len(f)}")
    mu1, mu2 = f1.mean(0), f2.mean(0)
    eye = np.eye(f1.shape[1]) * reg
    s1 = np.cov(f1, rowvar=False) + eye
    s2 = np.cov(f2, rowvar=False) + eye
    d = mu1 - mu2
    val = float(d @ d + np.trace(s1) + np.trace(s2) - 2.0 * _sqrtm_trace(s1, s2))
    return max(val, 0.0)


def ffd(samples: np.ndarray, refset: np.ndarray, fx: FeatureExtractor) -> float:
    return frechet_distance(fx.features(samples), fx.features(refset))
