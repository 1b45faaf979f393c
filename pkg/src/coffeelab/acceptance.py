"""End-to-end acceptance checks. Each check returns a Criterion with a
pass/fail verdict (or None when the item is reported without a threshold)
and the numbers behind it."""
from __future__ import annotations

import dataclasses
import logging
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .checkpoint import load_checkpoint, save_checkpoint, to_bytes
from .coffee import reg_loss
from .datagen import build_pretrain_corpus
from .diffusion import DenoiserNet, diffusion_loss, forward_noise, make_batch, make_schedule, to_model_space
from .harness import (
    STEERING, EvalReport, ExperimentConfig, RunSpec, asset_cpu_seconds, dumps, eval_head_path, evaluate_model,
    load_assets, model_checkpoint, model_from_checkpoint, pretrain_path, run_experiment, run_lambda_sweep,
    run_protocol_comparison, run_single, summarize,
)
from .textenc import EmbeddingTable, Vocabulary, encode, snapshot_refs

log = logging.getLogger(__name__)

GRAD_TOL = 1e-4
FD_STEP = 1e-6


@dataclass
class Criterion:
    number: int | str
    title: str
    passed: bool | None
    detail: str
    values: dict = field(default_factory=dict)

    def line(self) -> str:
        verdict = "REPORT" if self.passed is None else ("PASS" if self.passed else "FAIL")
        label = f"criterion {self.number}" if isinstance(self.number, int) else self.number
        return f"[{verdict}] {label}: {self.title} -- {self.detail}"


# --- gradient checks -------------------------------------------------------

def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-10)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(build: Callable[[], ad.Tensor], params: list[ad.Tensor], rng: np.random.Generator,
                    max_coords: int = 12) -> float:
    """Largest relative error between backprop and central differences over a
    random subset of coordinates of every parameter."""
    for p in params:
        p.grad = None
    with Graph() as g:
        root = build()
        g.backward(root)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        coords = rng.choice(flat.size, size=min(max_coords, flat.size), replace=False)
        fd = np.empty(len(coords))
        for k, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + FD_STEP
            up = build().item()
            flat[i] = old - FD_STEP
            down = build().item()
            flat[i] = old
            fd[k] = (up - down) / (2 * FD_STEP)
        worst = max(worst, _rel_err(p.grad.reshape(-1)[coords], fd))
    return worst


def _p(rng, *shape, away_from_zero: bool = False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 1e-2, np.sign(x + 1e-30) * (1e-2 + np.abs(x)), x)
    return ad.param(x, np.float64)


def _project(out: ad.Tensor, r: np.ndarray) -> ad.Tensor:
    return ad.sum_(ad.mul(out, ad.const(r, np.float64)))


def _op_case(kind: str, rng: np.random.Generator):
    m, n, k = (int(x) for x in rng.integers(1, 5, size=3))
    if kind == "matmul":
        a = _p(rng, m, n) if rng.random() < 0.7 else _p(rng, n)
        b = _p(rng, n, k)
        out_shape = (m, k) if a.data.ndim == 2 else (k,)
        return [a, b], lambda r: _project(ad.matmul(a, b), r), out_shape
    if kind in ("add", "mul"):
        a = _p(rng, m, n)
        b = _p(rng, n) if rng.random() < 0.5 else _p(rng, m, n)
        f = getattr(ad, kind)
        return [a, b], lambda r: _project(f(a, b), r), (m, n)
    if kind == "concat":
        axis = int(rng.integers(0, 2))
        a = _p(rng, m, n)
        b = _p(rng, k, n) if axis == 0 else _p(rng, m, k)
        shape = (m + k, n) if axis == 0 else (m, n + k)
        return [a, b], lambda r: _project(ad.concat([a, b], axis=axis), r), shape
    if kind in ("silu", "relu", "abs_"):
        a = _p(rng, m, n, away_from_zero=kind != "silu")
        f = getattr(ad, kind)
        return [a], lambda r: _project(f(a), r), (m, n)
    if kind == "scale":
        a = _p(rng, m, n)
        c = float(rng.normal())
        return [a], lambda r: _project(ad.scale(a, c), r), (m, n)
    if kind in ("sum_", "mean"):
        a = _p(rng, m, n)
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        f = getattr(ad, kind)
        shape = (1,) if axis is None else ((n,) if axis == 0 else (m,))
        return [a], lambda r: _project(f(a, axis=axis), r), shape
    if kind == "mse":
        a, b = _p(rng, m, n), _p(rng, m, n)
        return [a, b], lambda r: ad.scale(ad.mse(a, b), float(r[0])), (1,)
    if kind == "cosine_similarity":
        a, b = _p(rng, n + 1), _p(rng, n + 1)
        return [a, b], lambda r: ad.scale(ad.cosine_similarity(a, b), float(r[0])), (1,)
    if kind == "index_rows":
        t = _p(rng, m + 1, n)
        ids = rng.integers(0, m + 1, size=k + 1)
        return [t], lambda r: _project(ad.index_rows(t, ids), r), (k + 1, n)
    raise ValueError(kind)


DIFFERENTIABLE_OPS = ("matmul", "add", "mul", "concat", "silu", "relu", "abs_", "scale", "sum_", "mean",
                      "mse", "cosine_similarity", "index_rows")


def _diffusion_case(rng: np.random.Generator, schedule):
    vocab = Vocabulary.build(["circle", "square"], ["frame"])
    d = 4
    table = EmbeddingTable(vocab, rng.standard_normal((len(vocab), d)), dtype=np.float64)
    init = DenoiserNet.init(int(rng.integers(1 << 31)), cond_dim=d, hidden=6, schedule=schedule)
    net = DenoiserNet([p.data for p in init.params()], init.skip_sigma, dtype=np.float64)
    t = int(rng.integers(0, schedule.T))
    z_y = rng.uniform(-1, 1, 256)
    eps = rng.standard_normal(256)
    prompt = ["circle", "square frame", "circle without frame"][int(rng.integers(0, 3))]

    def build():
        return diffusion_loss(net, make_batch(z_y, t, eps, encode(prompt, table), schedule))

    return net.params() + table.params(), build


def _reg_case(rng: np.random.Generator):
    vocab = Vocabulary.build(["circle"], ["frame", "dot", "stripe"])
    d = int(rng.integers(2, 8))
    table = EmbeddingTable(vocab, rng.standard_normal((len(vocab), d)), dtype=np.float64)
    concepts = list(rng.choice(["frame", "dot", "stripe"], size=int(rng.integers(1, 4)), replace=False))
    refs = snapshot_refs("circle", concepts, table)
    # move the user embedding away from the snapshot so no term sits on the kink
    table.matrix.data[vocab.id("circle")] += rng.normal(0, 0.5, d)

    def build():
        return reg_loss(encode("circle", table), refs)

    return table.params(), build


def gradient_suite(n_instances: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per case over ``n_instances`` random instances."""
    rng = np.random.default_rng(seed)
    schedule = make_schedule()
    worst: dict[str, float] = {}
    for kind in DIFFERENTIABLE_OPS:
        w = 0.0
        for _ in range(n_instances):
            params, f, shape = _op_case(kind, rng)
            r = rng.standard_normal(shape)
            w = max(w, check_gradients(lambda: f(r), params, rng))
        worst[kind] = w
    for name, make in (("diffusion_loss", lambda: _diffusion_case(rng, schedule)), ("reg_loss", lambda: _reg_case(rng))):
        w = 0.0
        for _ in range(n_instances):
            params, build = make()
            w = max(w, check_gradients(build, params, rng, max_coords=6))
        worst[name] = w
    return worst


def criterion_gradients(n_instances: int = 100, seed: int = 0) -> Criterion:
    t0 = time.process_time()
    worst = gradient_suite(n_instances, seed)
    dt = time.process_time() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] <= GRAD_TOL and dt < 60
    return Criterion(1, "gradient correctness", ok,
                     f"{len(worst)} cases x {n_instances} instances, worst rel. err {worst[top]:.2e} ({top}), "
                     f"{dt:.1f}s CPU", {"worst": worst, "cpu_seconds": dt})


# --- forward-process moments -----------------------------------------------

def criterion_moments(n_draws: int = 10_000, n_t: int = 10, seed: int = 0) -> Criterion:
    """Pixel-pooled empirical mean and variance of z_t against the closed
    form, each within 3 Monte-Carlo standard errors."""
    t0 = time.process_time()
    rng = np.random.default_rng(seed)
    sch = make_schedule()
    z_y = to_model_space(build_pretrain_corpus(320, seed)[0].pixels).astype(np.float64)
    worst = 0.0
    rows = []
    for t in sorted(rng.choice(sch.T, size=n_t, replace=False)):
        eps = rng.standard_normal((n_draws, z_y.size)).astype(np.float32)
        zt = forward_noise(np.broadcast_to(z_y, eps.shape), np.full(n_draws, t), eps, sch).astype(np.float64)
        ab = sch.alpha_bar[t]
        var = 1 - ab
        mean_dev = float(np.mean(zt.mean(0) - np.sqrt(ab) * z_y))
        mean_se = np.sqrt(var / n_draws / z_y.size)
        var_dev = float(np.mean(zt.var(0, ddof=1)) - var)
        var_se = var * np.sqrt(2.0 / (n_draws - 1) / z_y.size)
        zm, zv = abs(mean_dev) / mean_se, abs(var_dev) / var_se
        worst = max(worst, zm, zv)
        rows.append({"t": int(t), "mean_z": zm, "var_z": zv})
    dt = time.process_time() - t0
    return Criterion(2, "forward-process moments", worst <= 3.0 and dt < 60,
                     f"{n_t} timesteps x {n_draws} draws, worst |deviation| {worst:.2f} SE, {dt:.1f}s CPU",
                     {"rows": rows, "cpu_seconds": dt})


# --- pipeline criteria -----------------------------------------------------

def _means(reports, method, key):
    return float(np.mean([getattr(r, key) for r in reports if r.method == method]))


def criterion_reg_fixed_point(all_reports) -> Criterion:
    vals = [r.l_reg_initial for r in all_reports]
    ok = all(v == 0.0 for v in vals)
    return Criterion(3, "regularizer fixed point", ok,
                     f"L_reg before the first update is exactly 0 on {sum(v == 0.0 for v in vals)}/{len(vals)} runs")


def criterion_lambda_degeneracy(sweep) -> Criterion:
    row = next((r for r in sweep["table"] if r["lambda"] == 0.0), None)
    ok = bool(row and row["matches_direct"])
    n = sum(1 for r in sweep["reports"] if r["method"] == "coffee" and r["lambda"] == 0.0)
    return Criterion(4, "lambda=0 equals direct", ok,
                     f"{n} coffee(lambda=0) checkpoints {'are' if ok else 'are NOT all'} bit-identical to direct")


def criterion_table1(reports, cpu_seconds: float) -> Criterion:
    pres_d, pres_c = _means(reports, "direct", "presence_rate"), _means(reports, "coffee", "presence_rate")
    mcs_d, mcs_c = _means(reports, "direct", "mcs_analog"), _means(reports, "coffee", "mcs_analog")
    is_d, is_c = _means(reports, "direct", "is_analog"), _means(reports, "coffee", "is_analog")
    checks = {
        "presence(coffee) <= 0.5 presence(direct)": pres_c <= 0.5 * pres_d,
        "mcs(coffee) < mcs(direct)": mcs_c < mcs_d,
        "presence(direct) >= 0.5": pres_d >= 0.5,
        "is(coffee) >= 0.8 is(direct)": is_c >= 0.8 * is_d,
        "runtime < 20 min CPU": cpu_seconds < 1200,
    }
    failed = [k for k, v in checks.items() if not v]
    return Criterion(5, "coffee suppresses the attribute", not failed,
                     f"presence {pres_c:.3f} vs direct {pres_d:.3f}; mcs {mcs_c:+.3f} vs {mcs_d:+.3f}; "
                     f"IS {is_c:.3f} vs {is_d:.3f}; {cpu_seconds / 60:.1f} min CPU"
                     + (f"; failed: {failed}" if failed else ""),
                     {"presence": [pres_d, pres_c], "mcs": [mcs_d, mcs_c], "is": [is_d, is_c],
                      "cpu_seconds": cpu_seconds, "checks": checks})


def criterion_table2(reports) -> Criterion:
    mcs_c = _means(reports, "coffee", "mcs_analog")
    vals = {m: _means(reports, m, "mcs_analog") for m in STEERING}
    ok = all(v >= 1.3 * mcs_c for v in vals.values())
    txt = ", ".join(f"{m} {v:+.3f}" for m, v in vals.items())
    return Criterion(6, "prompt steering alone is insufficient", ok,
                     f"mcs {txt}; needs >= 1.3 x coffee ({mcs_c:+.3f})", {"mcs": vals, "coffee": mcs_c})


def criterion_metric_agreement(reports) -> Criterion:
    """MCS and presence must order every compared method pair the same way."""
    pairs = [("coffee", "direct")] + [(m, "coffee") for m in STEERING]
    rows, ok = [], True
    for a, b in pairs:
        dm = _means(reports, a, "mcs_analog") - _means(reports, b, "mcs_analog")
        dp = _means(reports, a, "presence_rate") - _means(reports, b, "presence_rate")
        agree = dm == 0 or dp == 0 or (dm > 0) == (dp > 0)
        ok &= agree
        rows.append(f"{a} vs {b}: {'agree' if agree else 'DISAGREE'} (mcs {dm:+.3f}, presence {dp:+.3f})")
    return Criterion("metric agreement", "MCS and presence rank methods alike", ok, "; ".join(rows))


def monotone_with_tolerance(values, ses, increasing: bool) -> tuple[bool, int]:
    """At most one adjacent inversion, and that one within 1 pooled SE."""
    inversions, ok = 0, True
    for k in range(len(values) - 1):
        step = values[k + 1] - values[k]
        bad = step < 0 if increasing else step > 0
        if bad:
            inversions += 1
            if abs(step) > np.hypot(ses[k], ses[k + 1]):
                ok = False
    return ok and inversions <= 1, inversions


def criterion_lambda_trend(sweep) -> Criterion:
    rows = sweep["table"]
    mcs_ok, mcs_inv = monotone_with_tolerance([r["mcs_analog"] for r in rows], [r["mcs_analog_se"] for r in rows],
                                              increasing=False)
    ffd_ok, ffd_inv = monotone_with_tolerance([r["ffd_finetune"] for r in rows],
                                              [r["ffd_finetune_se"] for r in rows], increasing=True)
    one = next((r for r in rows if r["lambda"] == 1.0), None)
    guard = one is not None and one["is_analog"] >= 0.8 * sweep["direct"]["is_analog"]
    txt = "; ".join(f"lambda {r['lambda']:g}: mcs {r['mcs_analog']:+.3f} ffd {r['ffd_finetune']:.1f}" for r in rows)
    return Criterion(7, "lambda trend", mcs_ok and ffd_ok and guard,
                     f"{txt}; inversions mcs {mcs_inv} ffd {ffd_inv}; lambda=1 IS guard {'ok' if guard else 'fails'}",
                     {"mcs_ok": mcs_ok, "ffd_ok": ffd_ok, "guard": guard})


def criterion_drift(reports) -> Criterion:
    coffee = [r for r in reports if r.method == "coffee"]
    direct = {(r.base, r.attribute, r.seed): r for r in reports if r.method == "direct"}
    per_pair = {}
    for r in coffee:
        per_pair.setdefault(r.pair, []).append(r.drift)
    bound = {p: np.mean(v, axis=0).tolist() for p, v in per_pair.items()}
    bound_ok = all(max(v) <= 0.05 for v in bound.values())
    paired = [r.drift[k] < direct[(r.base, r.attribute, r.seed)].drift[k]
              for r in coffee for k in range(len(r.drift))]
    worst = max(max(v) for v in bound.values())
    return Criterion(8, "drift bound", bound_ok and all(paired),
                     f"worst mean coffee drift {worst:.4f} (<= 0.05); coffee < direct on {sum(paired)}/{len(paired)} "
                     f"paired runs", {"coffee_drift": bound})


def criterion_protocols(proto) -> Criterion:
    rows = {tuple(r["trainable_groups"]): r for r in proto["table"]}
    te, full = rows[("text_encoder",)], rows[("denoiser", "text_encoder")]
    is_rel = abs(te["is_analog"] / full["is_analog"] - 1)
    ffd_rel = abs(te["ffd"] / full["ffd"] - 1)
    ratio = te["n_params"] / full["n_params"]
    ok = is_rel <= 0.15 and ffd_rel <= 0.15 and ratio < 0.01
    return Criterion(9, "text-encoder-only protocol", ok,
                     f"IS {te['is_analog']:.3f} vs {full['is_analog']:.3f} ({100 * is_rel:.1f}%), ffd {te['ffd']:.1f} vs "
                     f"{full['ffd']:.1f} ({100 * ffd_rel:.1f}%), params {te['n_params']}/{full['n_params']} "
                     f"= {100 * ratio:.3f}%", {"is_rel": is_rel, "ffd_rel": ffd_rel, "param_ratio": ratio})


def reduced_config(work_dir: str | Path) -> ExperimentConfig:
    """A small but complete pipeline used by the determinism check."""
    return ExperimentConfig.from_dict({
        "concept_pairs": [["circle", "frame"]], "methods": ["direct", "coffee"], "seeds": [0],
        "lambda_sweep": [0.0, 1.0],
        "pretrain": {"corpus_size": 320, "steps": 300},
        "finetune": {"steps": 25},
        "paths": {"work_dir": str(work_dir)},
    })


def _pipeline_bytes(cfg: ExperimentConfig) -> bytes:
    assets = load_assets(cfg)
    reports = run_experiment(cfg, assets)
    sweep = run_lambda_sweep(cfg, assets=assets)
    body = {"reports": [r.to_dict() for r in reports], "summary": summarize(reports), "sweep": sweep}
    return dumps(body).encode()


def criterion_determinism(assets, cfg: ExperimentConfig) -> Criterion:
    with tempfile.TemporaryDirectory() as d1, tempfile.TemporaryDirectory() as d2:
        a = _pipeline_bytes(reduced_config(d1))
        b = _pipeline_bytes(reduced_config(d2))
        same_reports = a == b
        small = reduced_config(d1)
        same_files = all(Path(p(small)).read_bytes() == Path(p(reduced_config(d2))).read_bytes()
                         for p in (pretrain_path, eval_head_path))
        # fine-tuned checkpoint: save -> load -> save, and metrics before and after
        b0, a0 = cfg.concept_pairs[0]
        spec = RunSpec(0, b0, a0, "coffee", cfg.seeds[0], cfg.lam, tuple(cfg.trainable_groups))
        before, res, _ = run_single(assets, cfg, spec, keep=True)
        ck = model_checkpoint(res.net, res.table, assets.schedule, assets.pretrain_fp, spec.seed)
        path = Path(d1) / "finetuned.ckpt"
        save_checkpoint(path, ck)
        loaded = load_checkpoint(path, assets.pretrain_fp)
        round_trip = to_bytes(loaded) == path.read_bytes()
        net, table, _ = model_from_checkpoint(loaded)
        after = evaluate_model(assets, cfg, spec, net, table)
        keys = ("mcs_analog", "presence_rate", "is_analog", "ffd", "ffd_finetune", "drift", "checkpoint_sha256")
        same_metrics = all(getattr(before, k) == getattr(after, k) for k in keys)
    ok = same_reports and same_files and round_trip and same_metrics
    return Criterion(10, "determinism and persistence", ok,
                     f"reports byte-identical: {same_reports}; asset checkpoints identical: {same_files}; "
                     f"save/load/save identical: {round_trip}; metrics after reload identical: {same_metrics}")


def criterion_dominant(cfg: ExperimentConfig, assets, threads: int = 1) -> tuple[Criterion, list]:
    dom = dataclasses.replace(cfg, methods=["direct", "coffee"], dominant=True)
    reports = run_experiment(dom, assets, threads)
    vals = {k: (_means(reports, "direct", k), _means(reports, "coffee", k))
            for k in ("presence_rate", "mcs_analog", "ffd_finetune")}
    txt = "; ".join(f"{k} coffee {c:.3f} vs direct {d:.3f}" for k, (d, c) in vals.items())
    return Criterion(11, "dominant-attribute regime (reported)", None, f"dominant overlays: {txt}", vals), reports


@dataclass
class AcceptanceResult:
    criteria: list
    reports: list
    sweep: dict
    protocols: dict
    dominant: list

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.criteria)

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "criteria": [dataclasses.asdict(c) for c in self.criteria],
                "summary": summarize(self.reports),
                "reports": [r.to_dict() for r in self.reports],
                "lambda_sweep": self.sweep, "protocols": self.protocols,
                "dominant": [r.to_dict() for r in self.dominant]}


def run_acceptance(cfg: ExperimentConfig | None = None, threads: int = 1, n_grad_instances: int = 100) -> AcceptanceResult:
    cfg = cfg or ExperimentConfig()
    crit = [criterion_gradients(n_grad_instances), criterion_moments()]
    assets = load_assets(cfg)
    t0 = time.process_time()
    reports = run_experiment(cfg, assets, threads)
    run_cpu = time.process_time() - t0
    sweep = run_lambda_sweep(cfg, cfg.lambda_sweep or [0.0, 0.1, 1.0, 10.0], assets, threads)
    proto = run_protocol_comparison(cfg, assets, threads)
    everything = list(reports) + [EvalReport.from_dict(d) for d in sweep["reports"] + proto["reports"]]
    crit += [
        criterion_reg_fixed_point(everything),
        criterion_lambda_degeneracy(sweep),
        criterion_table1(reports, asset_cpu_seconds(cfg) + run_cpu),
        criterion_table2(reports),
        criterion_metric_agreement(reports),
        criterion_lambda_trend(sweep),
        criterion_drift(reports),
        criterion_protocols(proto),
        criterion_determinism(assets, cfg),
    ]
    dom_crit, dom_reports = criterion_dominant(cfg, assets, threads)
    crit.append(dom_crit)
    return AcceptanceResult(crit, reports, sweep, proto, dom_reports)
