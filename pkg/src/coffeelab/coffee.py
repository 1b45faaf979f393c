"""Cosine-drift regularized fine-tuning and the baselines it is compared to."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWState, Graph, Tensor
from .diffusion import (
    DenoiserNet, NoiseSchedule, diffusion_loss, make_batch, neg_prompt_train_loss, to_model_space,
)
from .textenc import ConceptRefs, EmbeddingTable, encode, encode_value

METHODS = ("direct", "coffee", "concept_removal", "neg_prompt_train", "neg_prompt_infer", "neg_prompt_both")
GROUPS = ("text_encoder", "denoiser")


@dataclass
class CoffeeConfig:
    lam: float = 1.0
    trainable_groups: frozenset = frozenset({"text_encoder"})
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 1
    weight_decay: float = 0.01
    guidance_scale: float = 3.0  # only used by the negative-prompt training loss
    live_concepts: bool = False  # re-encode v_m from the current table each step

    def __post_init__(self):
        self.trainable_groups = frozenset(self.trainable_groups)
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.trainable_groups or not self.trainable_groups <= set(GROUPS):
            raise ValueError(f"trainable_groups must be a non-empty subset of {GROUPS}")


@dataclass
class LossBreakdown:
    l_diffusion: float
    l_reg: float
    l_total: float
    per_concept_drift: list[float]


def _drift_terms(v: Tensor, refs: ConceptRefs, v_m: Sequence[Tensor] | None = None) -> list[Tensor]:
    if v.data.shape != refs.v_i.shape:
        raise ad.ShapeError(f"embedding shape {v.shape} does not match reference {list(refs.v_i.shape)}")
    v_m = v_m if v_m is not None else [ad.const(m) for m in refs.v_m]
    return [ad.abs_(ad.add(ad.const([c0]), ad.scale(ad.cosine_similarity(v, m), -1.0)))
            for c0, m in zip(refs.ref_cosines, v_m)]


def reg_loss(v: Tensor, refs: ConceptRefs, v_m: Sequence[Tensor] | None = None) -> Tensor:
    """Mean over undesired concepts of |cos(v_i, v_m) - cos(v, v_m)|, with
    cos(v_i, v_m) read from the snapshot."""
    return ad.mean(ad.concat(_drift_terms(v, refs, v_m)))


def total_loss(l_diff: Tensor, l_reg: Tensor, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return ad.add(l_diff, ad.scale(l_reg, lam))


def drift(table: EmbeddingTable, refs: ConceptRefs) -> list[float]:
    """Per-concept |cos(encode(c_i), v_m) - cos(v_i, v_m)| with the current table."""
    v = ad.const(encode_value(refs.user_prompt, table))
    return [t.item() for t in _drift_terms(v, refs)]


class GroupOptimizer:
    """AdamW over the parameters of the selected groups only."""

    def __init__(self, net: DenoiserNet, table: EmbeddingTable, groups, lr: float, weight_decay: float):
        self.params: list[Tensor] = []
        if "text_encoder" in groups:
            self.params += table.params()
        if "denoiser" in groups:
            self.params += net.params()
        self.states: list[AdamWState] = ad.make_states(self.params, lr=lr, weight_decay=weight_decay)
        self.frozen = [p for p in net.params() + table.params() if all(p is not q for q in self.params)]
        # frozen tensors become constants so backward skips their weight grads
        for p in self.frozen:
            p.requires_grad = False
        for p in self.params:
            p.requires_grad = True

    def zero_grad(self) -> None:
        ad.zero_grads(self.params + self.frozen)

    def step(self) -> None:
        ad.adamw_step(self.params, self.states)

    def n_trainable(self) -> int:
        return sum(p.size for p in self.params)


def _draw(rng: np.random.Generator, T: int, dim: int):
    t = int(rng.integers(0, T))
    eps = rng.standard_normal(dim).astype(np.float32)
    return t, eps


def finetune_step(method: str, net: DenoiserNet, table: EmbeddingTable, refs: ConceptRefs,
                  images: Sequence[np.ndarray], c_i: str, schedule: NoiseSchedule, config: CoffeeConfig,
                  rng: np.random.Generator, opt: GroupOptimizer) -> LossBreakdown:
    """One optimizer step for any method. Every method draws (t, eps) from
    ``rng`` identically, so seeded runs are paired."""
    if refs is None:
        raise ValueError("concept references missing: snapshot them before fine-tuning")
    lam = config.lam if method == "coffee" else 0.0
    neg = method in ("neg_prompt_train", "neg_prompt_both")
    opt.zero_grad()
    B = len(images)
    l_diff_sum = 0.0
    reg_val, terms = 0.0, []
    for k, img in enumerate(images):
        t, eps = _draw(rng, schedule.T, img.shape[-1])
        with Graph() as g:
            v = encode(c_i, table)
            batch = make_batch(to_model_space(img), t, eps, v, schedule)
            if neg:
                v_neg = encode(" ".join(refs.undesired), table)
                l_diff = neg_prompt_train_loss(net, batch, v, v_neg, config.guidance_scale)
            else:
                l_diff = diffusion_loss(net, batch)
            if B > 1:
                l_diff = ad.scale(l_diff, 1.0 / B)
            if k == 0:
                v_m = None
                if config.live_concepts:
                    v_m = [encode(c, table) for c in refs.undesired]
                term_t = _drift_terms(v, refs, v_m)
                l_reg = ad.mean(ad.concat(term_t))
                root = total_loss(l_diff, l_reg, lam)
                reg_val, terms = l_reg.item(), [x.item() for x in term_t]
            else:
                root = l_diff
            if root.requires_grad:
                g.backward(root)
        l_diff_sum += l_diff.item()
    opt.step()
    total = l_diff_sum + lam * reg_val if B > 1 else root.item()
    return LossBreakdown(l_diff_sum, reg_val, total, terms)


def coffee_step(net, table, refs, image, c_i, schedule, config: CoffeeConfig, rng, opt) -> LossBreakdown:
    return finetune_step("coffee", net, table, refs, [image], c_i, schedule, config, rng, opt)


@dataclass
class FinetuneResult:
    net: DenoiserNet
    table: EmbeddingTable
    trace: list[LossBreakdown] = field(default_factory=list)
    n_trainable: int = 0


def finetune(method: str, net: DenoiserNet, table: EmbeddingTable, data: Sequence[np.ndarray],
             refs: ConceptRefs, schedule: NoiseSchedule, config: CoffeeConfig,
             rng: np.random.Generator) -> FinetuneResult:
    """Fine-tune copies of ``net`` and ``table`` on ``data`` (pixel images in
    [0, 1]) cycling in order. ``concept_removal`` and ``neg_prompt_infer``
    train exactly like ``direct``; their intervention is at sampling time."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if refs is None:
        raise ValueError("concept references missing: snapshot them before fine-tuning")
    if not len(data):
        raise ValueError("no fine-tuning data")
    net, table = net.copy(), table.copy()
    opt = GroupOptimizer(net, table, config.trainable_groups, config.lr, config.weight_decay)
    res = FinetuneResult(net, table, n_trainable=opt.n_trainable())
    c_i = refs.user_prompt
    pos = 0
    for _ in range(config.steps):
        imgs = []
        for _ in range(config.batch_size):
            imgs.append(np.asarray(data[pos % len(data)], np.float32))
            pos += 1
        res.trace.append(finetune_step(method, net, table, refs, imgs, c_i, schedule, config, rng, opt))
    opt.zero_grad()
    for p in net.params() + table.params():
        p.requires_grad = True
    return res


def write_trace_csv(path: str | Path, trace: Sequence[LossBreakdown], concepts: Sequence[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "l_diffusion", "l_reg", "l_total", *[f"drift_{c}" for c in concepts]])
        for k, b in enumerate(trace):
            w.writerow([k, repr(b.l_diffusion), repr(b.l_reg), repr(b.l_total), *map(repr, b.per_concept_drift)])
