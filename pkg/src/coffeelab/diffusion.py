"""Conditional DDPM in pixel space: linear noise schedule, MLP noise
predictor conditioned on a prompt embedding, training loss, ancestral
sampling with classifier-free guidance."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .datagen import ATTRIBUTES, BASES, N_PIX, LabeledImage, combinations, stack
from .textenc import UNCOND, EmbeddingTable, Vocabulary, encode_value, pooling_matrix

log = logging.getLogger(__name__)

TIME_DIM = 32
HIDDEN = 256


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.04

    @property
    def T(self) -> int:
        return len(self.beta)


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.04) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for k in range(T):
        acc *= alpha[k]
        alpha_bar[k] = acc
    return NoiseSchedule(beta, alpha, alpha_bar, beta_start, beta_end)


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.size and (t.min() < 0 or t.max() >= schedule.T):
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")
    return t


def noise_with(z_y: np.ndarray, eps: np.ndarray, alpha_bar_t) -> np.ndarray:
    ab = np.asarray(alpha_bar_t, dtype=np.float64)
    if ab.ndim == 1:
        ab = ab[:, None]
    a = np.sqrt(ab).astype(np.float32)
    b = np.sqrt(1.0 - ab).astype(np.float32)
    return a * np.asarray(z_y, np.float32) + b * np.asarray(eps, np.float32)


def forward_noise(z_y: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    t = _check_t(t, schedule)
    return noise_with(z_y, eps, schedule.alpha_bar[t])


def skip_scale(schedule: "NoiseSchedule") -> np.ndarray:
    return np.sqrt(1.0 - schedule.alpha_bar)


class DenoiserNet:
    """MLP eps-predictor on concat[z_t, time embedding, prompt embedding].

    With ``skip_sigma`` set, the output is sigma_t * z_t + MLP(...): the
    parameter-free skip carries the near-identity part of the target at high
    noise, which the MLP alone reproduces too coarsely for the prompt signal
    to survive sampling."""

    def __init__(self, weights: Sequence[np.ndarray], skip_sigma: np.ndarray | None = None, dtype=np.float32):
        self.layers = [ad.param(w, dtype) for w in weights]
        # sqrt(1 - alpha_bar_t) per timestep; adds sigma_t * z_t to the MLP output
        self.skip_sigma = skip_sigma

    @classmethod
    def init(cls, seed: int, data_dim: int = N_PIX, cond_dim: int = 32, hidden: int = HIDDEN,
             zero_final: bool = False, schedule: "NoiseSchedule | None" = None) -> "DenoiserNet":
        rng = np.random.default_rng(seed)
        dims = [data_dim + TIME_DIM + cond_dim, hidden, hidden, data_dim]
        ws = []
        for k, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
            last = k == len(dims) - 2
            w = np.zeros((i, o)) if (last and zero_final) else rng.standard_normal((i, o)) / np.sqrt(i)
            ws += [w.astype(np.float32), np.zeros(o, np.float32)]
        return cls(ws, None if schedule is None else skip_scale(schedule))

    def params(self) -> list[Tensor]:
        return list(self.layers)

    def n_params(self) -> int:
        return sum(p.size for p in self.layers)

    def copy(self) -> "DenoiserNet":
        return DenoiserNet([p.data.copy() for p in self.layers], self.skip_sigma, self.layers[0].data.dtype)

    @property
    def cond_dim(self) -> int:
        return self.layers[0].data.shape[0] - N_PIX - TIME_DIM


def predict_noise(net: DenoiserNet, z_t, t, v: Tensor) -> Tensor:
    """eps_theta(z_t, t, v). Accepts a single example ([256], int, [d]) or a
    batch ([B, 256], [B], [B, d] or a shared [d] without gradient)."""
    z = z_t if isinstance(z_t, Tensor) else ad.const(z_t)
    temb = ad.sinusoid_embed(np.atleast_1d(t), TIME_DIM)
    if z.data.ndim == 1:
        if v.data.ndim != 1:
            raise ad.ShapeError(f"predict_noise: single z_t {z.shape} with batched v {v.shape}")
        temb = ad.const(temb.data[0])
    else:
        B = z.data.shape[0]
        if temb.data.shape[0] == 1 and B > 1:
            temb = ad.const(np.broadcast_to(temb.data, (B, TIME_DIM)))
        if v.data.ndim == 1:
            if v.requires_grad:
                raise ad.ShapeError("predict_noise: cannot broadcast a differentiable 1-D v over a batch")
            v = ad.const(np.broadcast_to(v.data, (B, v.data.shape[0])))
    if v.data.shape[-1] != net.cond_dim:
        raise ad.ShapeError(f"predict_noise: v has width {v.shape[-1]}, net expects {net.cond_dim}")
    h = ad.concat([z, temb, v], axis=-1)
    w1, b1, w2, b2, w3, b3 = net.layers
    h = ad.silu(ad.add(ad.matmul(h, w1), b1))
    h = ad.silu(ad.add(ad.matmul(h, w2), b2))
    out = ad.add(ad.matmul(h, w3), b3)
    if net.skip_sigma is not None:
        sig = net.skip_sigma[np.atleast_1d(t)].astype(np.float32)
        skip = z.data * (sig[0] if z.data.ndim == 1 else sig[:, None])
        out = ad.add(out, ad.const(skip))
    return out


@dataclass
class DiffusionBatch:
    z_y: np.ndarray
    t: np.ndarray | int
    eps: np.ndarray
    z_t: np.ndarray
    v: Tensor


def make_batch(z_y: np.ndarray, t, eps: np.ndarray, v: Tensor, schedule: NoiseSchedule) -> DiffusionBatch:
    return DiffusionBatch(z_y, t, eps, forward_noise(z_y, t, eps, schedule), v)


def to_model_space(pixels: np.ndarray) -> np.ndarray:
    return (np.asarray(pixels, np.float32) * 2.0 - 1.0).astype(np.float32)


def to_pixel_space(z: np.ndarray) -> np.ndarray:
    return ((np.clip(z, -1.0, 1.0) + 1.0) * 0.5).astype(np.float32)


def diffusion_loss(net: DenoiserNet, batch: DiffusionBatch) -> Tensor:
    eps_hat = predict_noise(net, batch.z_t, batch.t, batch.v)
    return ad.mse(eps_hat, ad.const(batch.eps))


def guided(eps_ref: Tensor, eps_cond: Tensor, w: float) -> Tensor:
    """eps_ref + w * (eps_cond - eps_ref); w = 0 returns eps_ref bit-exactly."""
    return ad.add(eps_ref, ad.scale(ad.add(eps_cond, ad.scale(eps_ref, -1.0)), w))


def neg_prompt_train_loss(net: DenoiserNet, batch: DiffusionBatch, v: Tensor, v_neg: Tensor, w: float) -> Tensor:
    """MSE against the guided prediction (1+w) eps(v) - w eps(v_neg), written
    as eps(v) + w (eps(v) - eps(v_neg)) so w = 0 and v_neg == v reduce to the
    plain loss exactly."""
    e_pos = predict_noise(net, batch.z_t, batch.t, v)
    e_neg = predict_noise(net, batch.z_t, batch.t, v_neg)
    pred = ad.add(e_pos, ad.scale(ad.add(e_pos, ad.scale(e_neg, -1.0)), w))
    return ad.mse(pred, ad.const(batch.eps))


# --- pretraining -----------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 12000
    batch_size: int = 64
    lr: float = 2e-3
    lr_final: float = 0.0  # cosine decay from lr to lr_final
    weight_decay: float = 0.0
    p_uncond: float = 0.1
    skip: bool = True
    seed: int = 0
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.04
    bases: tuple = BASES
    attributes: tuple = ATTRIBUTES


@dataclass
class PretrainResult:
    net: DenoiserNet
    table: EmbeddingTable
    losses: list = field(default_factory=list)
    uncond_used: int = 0


def check_coverage(corpus: Sequence[LabeledImage], bases=BASES, attributes=ATTRIBUTES) -> None:
    seen = {(im.base, next(iter(im.attributes)) if im.attributes else None) for im in corpus
            if len(im.attributes) <= 1}
    missing = [c for c in combinations(bases, attributes) if c not in seen]
    if missing:
        raise ValueError(f"pretraining corpus is missing combinations: {missing}")


def pretrain(corpus: Sequence[LabeledImage], config: PretrainConfig,
             vocab: Vocabulary | None = None) -> PretrainResult:
    """Joint training of denoiser and embedding table on the clean corpus,
    with prompt dropout to <uncond> so guidance works later."""
    check_coverage(corpus, config.bases, config.attributes)
    vocab = vocab or Vocabulary.build(config.bases, config.attributes)
    schedule = make_schedule(config.T, config.beta_start, config.beta_end)
    ss = np.random.SeedSequence(config.seed)
    s_net, s_tab, s_data = ss.spawn(3)
    net = DenoiserNet.init(int(s_net.generate_state(1)[0]), schedule=schedule if config.skip else None)
    table = EmbeddingTable.init(vocab, int(s_tab.generate_state(1)[0]))
    rng = np.random.default_rng(s_data)

    images = to_model_space(stack(corpus))
    pools = pooling_matrix([im.prompt for im in corpus], vocab)
    uncond_row = np.zeros(len(vocab), np.float32)
    uncond_row[vocab.id(UNCOND)] = 1.0

    params = net.params() + table.params()
    states = ad.make_states(params, lr=config.lr, weight_decay=config.weight_decay)
    result = PretrainResult(net, table)
    for step in range(config.steps):
        lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + np.cos(np.pi * step / config.steps))
        for s in states:
            s.lr = lr
        idx = rng.integers(0, len(corpus), config.batch_size)
        t = rng.integers(0, schedule.T, config.batch_size)
        eps = rng.standard_normal((config.batch_size, N_PIX)).astype(np.float32)
        drop = rng.random(config.batch_size) < config.p_uncond
        pool = pools[idx].copy()
        pool[drop] = uncond_row
        result.uncond_used += int(drop.sum())
        ad.zero_grads(params)
        with Graph() as g:
            v = ad.matmul(ad.const(pool), table.matrix)
            loss = diffusion_loss(net, make_batch(images[idx], t, eps, v, schedule))
            g.backward(loss)
        ad.adamw_step(params, states)
        result.losses.append(loss.item())
        if step % 1000 == 0:
            log.info("pretrain step %d loss %.4f", step, loss.item())
    ad.zero_grads(params)
    return result


# --- sampling --------------------------------------------------------------

@dataclass
class SamplerConfig:
    guidance_scale: float = 1.0
    negative_prompt: str | None = None
    seed: int = 0
    steps: int | None = None  # None means schedule.T

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.guidance_scale}")


def ddpm_sample(net: DenoiserNet, table: EmbeddingTable, prompt: str, schedule: NoiseSchedule,
                cfg: SamplerConfig, n: int = 1, v: np.ndarray | None = None) -> np.ndarray:
    """Ancestral DDPM sampling with x0 clipping. Returns [n, 256] images in
    [0, 1]. With guidance scale w the prediction is
    eps_ref + w (eps_cond - eps_ref), where eps_ref uses <uncond> or the
    negative prompt; w = 1 without a negative prompt is plain conditional
    sampling and evaluates only the conditional branch."""
    steps = cfg.steps or schedule.T
    if steps != schedule.T:
        raise ValueError(f"sampler runs the full chain: steps must equal T={schedule.T}")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    cond = ad.const(encode_value(prompt, table) if v is None else v)
    w = float(cfg.guidance_scale)
    single = w == 1.0 and cfg.negative_prompt is None
    ref = None
    if not single:
        ref = ad.const(encode_value(cfg.negative_prompt if cfg.negative_prompt else UNCOND, table))
    ab, beta, alpha = schedule.alpha_bar, schedule.beta, schedule.alpha
    z = rng.standard_normal((n, N_PIX)).astype(np.float32)
    for t in range(schedule.T - 1, -1, -1):
        tt = np.full(n, t)
        if single:
            eps = predict_noise(net, z, tt, cond).data
        elif w == 0.0:
            eps = predict_noise(net, z, tt, ref).data
        else:
            e_ref = predict_noise(net, z, tt, ref)
            e_cond = predict_noise(net, z, tt, cond)
            eps = guided(e_ref, e_cond, w).data
        ab_t = ab[t]
        ab_prev = ab[t - 1] if t > 0 else 1.0
        x0 = (z.astype(np.float64) - np.sqrt(1 - ab_t) * eps) / np.sqrt(ab_t)
        x0 = np.clip(x0, -1.0, 1.0)
        mean = (np.sqrt(ab_prev) * beta[t] / (1 - ab_t)) * x0 + \
               (np.sqrt(alpha[t]) * (1 - ab_prev) / (1 - ab_t)) * z
        if t > 0:
            var = beta[t] * (1 - ab_prev) / (1 - ab_t)
            mean = mean + np.sqrt(var) * rng.standard_normal((n, N_PIX))
        z = mean.astype(np.float32)
    return to_pixel_space(z)
