"""Experiment pipeline: configuration, cached pretrained assets, paired
fine-tuning runs, reports and the lambda / protocol sweeps."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .checkpoint import Checkpoint, fingerprint, load_checkpoint, save_checkpoint, to_bytes
from .coffee import GROUPS, METHODS, CoffeeConfig, FinetuneResult, drift, finetune
from .datagen import (
    ATTRIBUTES, BASES, build_clean_set, build_finetune_set, build_pretrain_corpus, image_grid, stack,
    write_pgm,
)
from .diffusion import (
    DenoiserNet, NoiseSchedule, PretrainConfig, SamplerConfig, ddpm_sample, make_schedule, pretrain,
    skip_scale,
)
from .evaluation import (
    FeatureExtractor, attribute_prototype, ffd, is_analog, mcs_analog, presence_rate,
    train_feature_extractor,
)
from .textenc import WITHOUT, EmbeddingTable, Vocabulary, snapshot_refs

log = logging.getLogger(__name__)

DEFAULT_PAIRS = (("circle", "frame"), ("square", "stripe"), ("triangle", "dot"), ("cross", "checker"))
STEERING = ("concept_removal", "neg_prompt_infer", "neg_prompt_both")
MINUS = "−"


class ConfigError(ValueError):
    pass


class MissingAssetError(FileNotFoundError):
    pass


# --- configuration ---------------------------------------------------------

@dataclass
class PretrainSettings:
    corpus_size: int = 2000
    corpus_seed: int = 0
    steps: int = 12000
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.04
    p_uncond: float = 0.1


@dataclass
class EvalHeadSettings:
    corpus_size: int = 1600
    corpus_seed: int = 1
    steps: int = 3000
    seed: int = 0
    refset_size: int = 1600
    refset_seed: int = 5
    n_ffd_ref: int = 128


@dataclass
class FinetuneSettings:
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 1
    weight_decay: float = 0.01
    n_images: int = 10
    live_concepts: bool = False


@dataclass
class SamplerSettings:
    # applied to the negative-prompt samplers only; plain sampling uses w = 1
    guidance_scale: float = 3.0


@dataclass
class PathSettings:
    work_dir: str = "coffeelab_runs"


@dataclass
class ExperimentConfig:
    concept_pairs: list = field(default_factory=lambda: [list(p) for p in DEFAULT_PAIRS])
    methods: list = field(default_factory=lambda: list(METHODS))
    lam: float = 1.0
    lambda_sweep: list | None = field(default_factory=lambda: [0.0, 0.1, 1.0, 10.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    trainable_groups: list = field(default_factory=lambda: ["text_encoder"])
    dominant: bool = False
    n_eval_samples: int = 16
    n_ffd_samples: int = 64
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    eval_head: EvalHeadSettings = field(default_factory=EvalHeadSettings)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def __post_init__(self):
        self.concept_pairs = [tuple(p) for p in self.concept_pairs]
        for p in self.concept_pairs:
            if len(p) != 2 or p[0] not in BASES or p[1] not in ATTRIBUTES:
                raise ConfigError(f"bad concept pair {p!r}; expected (base in {BASES}, attribute in {ATTRIBUTES})")
        if not self.methods:
            raise ConfigError("at least one method is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if not self.trainable_groups or any(g not in GROUPS for g in self.trainable_groups):
            raise ConfigError(f"trainable_groups must be a non-empty subset of {GROUPS}")
        if self.n_eval_samples < 16:
            raise ConfigError(f"n_eval_samples must be >= 16, got {self.n_eval_samples}")
        if self.n_ffd_samples < max(33, self.n_eval_samples):
            raise ConfigError("n_ffd_samples must be >= max(33, n_eval_samples)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["concept_pairs"] = [list(p) for p in self.concept_pairs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("paths")  # where files land does not change any number
        return fingerprint(d)


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields) - ({"lambda"} if cls is ExperimentConfig else set()))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    for k, v in d.items():
        sub = _SECTIONS.get(k) if cls is ExperimentConfig else None
        kw[k] = _build(sub, v, f"{where}.{k}") if sub else v
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


_SECTIONS = {"sampler": SamplerSettings, "pretrain": PretrainSettings, "eval_head": EvalHeadSettings,
             "finetune": FinetuneSettings, "paths": PathSettings}


# --- assets ----------------------------------------------------------------

@dataclass
class Assets:
    net: DenoiserNet
    table: EmbeddingTable
    schedule: NoiseSchedule
    fx: FeatureExtractor
    prototypes: dict
    pretrain_fp: str
    fx_fp: str


def pretrain_fingerprint(cfg: ExperimentConfig) -> str:
    return fingerprint({"pretrain": asdict(cfg.pretrain), "skip": True})


def eval_head_fingerprint(cfg: ExperimentConfig) -> str:
    return fingerprint({"eval_head": asdict(cfg.eval_head)})


def _schedule_dict(s: NoiseSchedule) -> dict:
    return {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end}


def model_checkpoint(net: DenoiserNet, table: EmbeddingTable, schedule: NoiseSchedule, fp: str,
                     seed: int, meta: dict | None = None) -> Checkpoint:
    arrays = {f"denoiser.{k}": p.data for k, p in enumerate(net.params())}
    arrays["embedding"] = table.matrix.data
    return Checkpoint(arrays, list(table.vocab.tokens), _schedule_dict(schedule), fp, seed,
                      {"kind": "model", "skip": net.skip_sigma is not None, **(meta or {})})


def model_from_checkpoint(ck: Checkpoint) -> tuple[DenoiserNet, EmbeddingTable, NoiseSchedule]:
    if ck.meta.get("kind") != "model":
        raise ValueError(f"checkpoint holds {ck.meta.get('kind')!r}, not a model")
    sch = make_schedule(ck.schedule["T"], ck.schedule["beta_start"], ck.schedule["beta_end"])
    n = sum(1 for k in ck.arrays if k.startswith("denoiser."))
    net = DenoiserNet([ck.arrays[f"denoiser.{k}"] for k in range(n)],
                      skip_scale(sch) if ck.meta.get("skip") else None)
    table = EmbeddingTable(Vocabulary(tuple(ck.vocabulary)), ck.arrays["embedding"])
    return net, table, sch


def fx_checkpoint(fx: FeatureExtractor, fp: str, seed: int, report: dict | None = None) -> Checkpoint:
    arrays = {f"fx.{k}": p.data for k, p in enumerate(fx.params())}
    return Checkpoint(arrays, [], {}, fp, seed, {"kind": "feature_extractor", "bases": list(fx.bases),
                                                 "attributes": list(fx.attributes), "report": report or {}})


def fx_from_checkpoint(ck: Checkpoint) -> FeatureExtractor:
    if ck.meta.get("kind") != "feature_extractor":
        raise ValueError(f"checkpoint holds {ck.meta.get('kind')!r}, not a feature extractor")
    fx = FeatureExtractor([ck.arrays[f"fx.{k}"] for k in range(len(ck.arrays))],
                          ck.meta["bases"], ck.meta["attributes"])
    for p in fx.params():
        p.requires_grad = False
    return fx


def work_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.paths.work_dir)


def pretrain_path(cfg: ExperimentConfig) -> Path:
    return work_dir(cfg) / f"pretrain_{pretrain_fingerprint(cfg)}.ckpt"


def eval_head_path(cfg: ExperimentConfig) -> Path:
    return work_dir(cfg) / f"eval_head_{eval_head_fingerprint(cfg)}.ckpt"


def run_pretrain(cfg: ExperimentConfig) -> Path:
    p = cfg.pretrain
    t0 = time.process_time()
    corpus = build_pretrain_corpus(p.corpus_size, p.corpus_seed)
    res = pretrain(corpus, PretrainConfig(steps=p.steps, batch_size=p.batch_size, lr=p.lr, seed=p.seed, T=p.T,
                                          beta_start=p.beta_start, beta_end=p.beta_end, p_uncond=p.p_uncond))
    sch = make_schedule(p.T, p.beta_start, p.beta_end)
    path = pretrain_path(cfg)
    save_checkpoint(path, model_checkpoint(res.net, res.table, sch, pretrain_fingerprint(cfg), p.seed,
                                           {"final_loss": float(np.mean(res.losses[-200:]))}))
    _write_timing(path, time.process_time() - t0)
    return path


def run_train_eval_head(cfg: ExperimentConfig) -> Path:
    e = cfg.eval_head
    t0 = time.process_time()
    fx, rep = train_feature_extractor(build_pretrain_corpus(e.corpus_size, e.corpus_seed), e.seed, steps=e.steps)
    path = eval_head_path(cfg)
    save_checkpoint(path, fx_checkpoint(fx, eval_head_fingerprint(cfg), e.seed, asdict(rep)))
    _write_timing(path, time.process_time() - t0)
    return path


def timing_path(ckpt_path: Path) -> Path:
    return ckpt_path.with_suffix(".timing.json")


def _write_timing(ckpt_path: Path, cpu_seconds: float) -> None:
    # kept out of the checkpoint header so checkpoints stay byte-reproducible
    timing_path(ckpt_path).write_text(json.dumps({"cpu_seconds": cpu_seconds}))


def asset_cpu_seconds(cfg: "ExperimentConfig") -> float:
    """CPU time spent building the cached assets (0 if unrecorded)."""
    total = 0.0
    for p in (pretrain_path(cfg), eval_head_path(cfg)):
        tp = timing_path(p)
        if tp.exists():
            total += float(json.loads(tp.read_text())["cpu_seconds"])
    return total


def load_assets(cfg: ExperimentConfig, build: bool = True) -> Assets:
    """Load the pretrained model and feature extractor for ``cfg``, training
    and caching them first when ``build`` is set."""
    pp, ep = pretrain_path(cfg), eval_head_path(cfg)
    if not pp.exists():
        if not build:
            raise MissingAssetError(f"no pretrained checkpoint at {pp}; run `coffeelab pretrain --config <cfg>`")
        run_pretrain(cfg)
    if not ep.exists():
        if not build:
            raise MissingAssetError(f"no feature extractor at {ep}; run `coffeelab train-eval-head --config <cfg>`")
        run_train_eval_head(cfg)
    net, table, sch = model_from_checkpoint(load_checkpoint(pp, pretrain_fingerprint(cfg)))
    fx = fx_from_checkpoint(load_checkpoint(ep, eval_head_fingerprint(cfg)))
    e = cfg.eval_head
    refset = build_pretrain_corpus(e.refset_size, e.refset_seed)
    protos = {a: attribute_prototype(refset, a, fx) for a in fx.attributes}
    return Assets(net, table, sch, fx, protos, pretrain_fingerprint(cfg), eval_head_fingerprint(cfg))


# --- single runs -----------------------------------------------------------

@dataclass
class EvalReport:
    """One (pair, method, seed) evaluation. ``ffd`` is measured against
    attribute-free images of the base concept (lower is better);
    ``ffd_finetune`` against fresh draws of the fine-tuning distribution."""
    base: str
    attribute: str
    method: str
    seed: int
    lam: float
    trainable_groups: list
    guidance_scale: float
    inference_prompt: str
    negative_prompt: str | None
    mcs_analog: float
    presence_rate: float
    is_analog: float
    ffd: float
    ffd_finetune: float
    drift: list
    l_reg_initial: float
    n_samples: int
    n_trainable: int
    fingerprint: str
    config_fingerprint: str
    checkpoint_sha256: str
    dominant: bool = False

    @property
    def pair(self) -> str:
        return f"{self.base}/{self.attribute}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class RunSpec:
    pair_index: int
    base: str
    attribute: str
    method: str
    seed: int
    lam: float
    groups: tuple
    dominant: bool = False


def _sub_seed(seed: int, pair_index: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, pair_index, tag]).generate_state(1)[0])


def inference_prompts(method: str, base: str, attribute: str) -> tuple[str, str | None]:
    if method == "concept_removal":
        return f"{base} {WITHOUT} {attribute}", None
    if method in ("neg_prompt_infer", "neg_prompt_both"):
        return base, attribute
    return base, None


def run_single(assets: Assets, cfg: ExperimentConfig, spec: RunSpec,
               keep: bool = False) -> tuple[EvalReport, FinetuneResult | None, np.ndarray | None]:
    """Snapshot refs, fine-tune, sample and evaluate one run. The training
    noise stream depends on (seed, pair) only, so methods are paired."""
    f = cfg.finetune
    data = build_finetune_set(spec.base, spec.attribute, f.n_images, _sub_seed(spec.seed, spec.pair_index, 1),
                              dominant=spec.dominant)
    refs = snapshot_refs(spec.base, [spec.attribute], assets.table)
    ccfg = CoffeeConfig(lam=spec.lam, trainable_groups=frozenset(spec.groups), steps=f.steps, lr=f.lr,
                        batch_size=f.batch_size, weight_decay=f.weight_decay,
                        guidance_scale=cfg.sampler.guidance_scale, live_concepts=f.live_concepts)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, spec.pair_index, 0]))
    res = finetune(spec.method, assets.net, assets.table, [im.pixels for im in data], refs, assets.schedule,
                   ccfg, rng)
    l_reg0 = res.trace[0].l_reg if res.trace else 0.0
    report, samples = evaluate_model(assets, cfg, spec, res.net, res.table, l_reg_initial=l_reg0,
                                     n_trainable=res.n_trainable, return_samples=True)
    if keep:
        return report, res, samples
    return report, None, None


def sample_for(assets: Assets, cfg: ExperimentConfig, spec: RunSpec, net: DenoiserNet,
               table: EmbeddingTable) -> tuple[np.ndarray, str, str | None]:
    prompt, negative = inference_prompts(spec.method, spec.base, spec.attribute)
    w = cfg.sampler.guidance_scale if negative else 1.0
    scfg = SamplerConfig(guidance_scale=w, negative_prompt=negative, seed=_sub_seed(spec.seed, spec.pair_index, 2))
    return ddpm_sample(net, table, prompt, assets.schedule, scfg, n=cfg.n_ffd_samples), prompt, negative


def evaluate_model(assets: Assets, cfg: ExperimentConfig, spec: RunSpec, net: DenoiserNet, table: EmbeddingTable,
                   l_reg_initial: float = 0.0, n_trainable: int = 0, return_samples: bool = False):
    """Sample with the method's inference prompt and score the samples.
    IS, presence and MCS use the first n_eval_samples; both Frechet
    distances use all n_ffd_samples."""
    samples, prompt, negative = sample_for(assets, cfg, spec, net, table)
    head = samples[: cfg.n_eval_samples]
    fx = assets.fx
    n_ref = cfg.eval_head.n_ffd_ref
    clean = stack(build_clean_set(spec.base, n_ref, _sub_seed(spec.seed, spec.pair_index, 3)))
    ftdist = stack(build_finetune_set(spec.base, spec.attribute, n_ref, _sub_seed(spec.seed, spec.pair_index, 4),
                                      dominant=spec.dominant))
    refs = snapshot_refs(spec.base, [spec.attribute], assets.table)
    ck = model_checkpoint(net, table, assets.schedule, assets.pretrain_fp, spec.seed)
    report = EvalReport(
        base=spec.base, attribute=spec.attribute, method=spec.method, seed=spec.seed,
        lam=spec.lam if spec.method == "coffee" else 0.0, trainable_groups=sorted(spec.groups),
        guidance_scale=cfg.sampler.guidance_scale, inference_prompt=prompt, negative_prompt=negative,
        mcs_analog=mcs_analog(head, spec.attribute, fx, prototype=assets.prototypes[spec.attribute]),
        presence_rate=presence_rate(head, spec.attribute, fx),
        is_analog=is_analog(head, fx),
        ffd=ffd(samples, clean, fx), ffd_finetune=ffd(samples, ftdist, fx),
        drift=drift(table, refs), l_reg_initial=l_reg_initial, n_samples=len(head), n_trainable=n_trainable,
        fingerprint=assets.pretrain_fp, config_fingerprint=cfg.fingerprint(),
        checkpoint_sha256=hashlib.sha256(to_bytes(ck)).hexdigest(), dominant=spec.dominant,
    )
    return (report, samples) if return_samples else report


def _run_task(args):
    assets, cfg, spec = args
    return run_single(assets, cfg, spec)[0]


def run_many(assets: Assets, cfg: ExperimentConfig, specs: Sequence[RunSpec], threads: int = 1) -> list[EvalReport]:
    """Independent runs, optionally on a process pool. Output order follows
    (pair, method, seed) regardless of completion order."""
    if threads > 1 and len(specs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            reports = list(ex.map(_run_task, [(assets, cfg, s) for s in specs]))
    else:
        reports = []
        for s in specs:
            log.info("run %s/%s %s seed %d lam %g", s.base, s.attribute, s.method, s.seed, s.lam)
            reports.append(run_single(assets, cfg, s)[0])
    return sort_reports(reports)


def sort_reports(reports: Sequence[EvalReport]) -> list[EvalReport]:
    order = {m: i for i, m in enumerate(METHODS)}
    return sorted(reports, key=lambda r: (r.base, r.attribute, order[r.method], r.lam, r.seed,
                                          r.trainable_groups))


def run_experiment(cfg: ExperimentConfig, assets: Assets | None = None, threads: int = 1) -> list[EvalReport]:
    assets = assets or load_assets(cfg)
    specs = [RunSpec(i, b, a, m, s, cfg.lam, tuple(cfg.trainable_groups), cfg.dominant)
             for i, (b, a) in enumerate(cfg.concept_pairs) for m in cfg.methods for s in cfg.seeds]
    return run_many(assets, cfg, specs, threads)


# --- summaries -------------------------------------------------------------

def format_delta(value: float, ref: float) -> str:
    """Signed percentage change with two decimals, e.g. "−50.00%"."""
    if ref == 0:
        return "n/a"
    pct = 100.0 * (value - ref) / abs(ref)
    text = f"{abs(pct):.2f}%"
    if text == "0.00%":
        return text
    return ("+" if pct > 0 else MINUS) + text


METRICS = ("mcs_analog", "presence_rate", "is_analog", "ffd", "ffd_finetune")


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else float("nan")


def summarize(reports: Sequence[EvalReport]) -> list[dict]:
    """One row per method with metric means over pairs and seeds, plus the
    difference with direct fine-tuning."""
    rows = []
    methods = [m for m in METHODS if any(r.method == m for r in reports)]
    means = {}
    for m in methods:
        rs = [r for r in reports if r.method == m]
        means[m] = {k: _mean([getattr(r, k) for r in rs]) for k in METRICS}
        means[m]["drift"] = _mean([np.mean(r.drift) for r in rs])
        means[m]["n_runs"] = len(rs)
    for m in methods:
        row = {"method": m, **means[m]}
        if "direct" in means:
            row["difference_with_direct"] = {k: format_delta(means[m][k], means["direct"][k]) for k in METRICS}
        rows.append(row)
    return rows


def _seed_stats(reports: Sequence[EvalReport], key: str) -> tuple[float, float]:
    """Mean over all runs and the standard error of the per-seed means."""
    seeds = sorted({r.seed for r in reports})
    per_seed = [np.mean([_value(r, key) for r in reports if r.seed == s]) for s in seeds]
    se = float(np.std(per_seed, ddof=1) / np.sqrt(len(per_seed))) if len(per_seed) > 1 else 0.0
    return float(np.mean([_value(r, key) for r in reports])), se


def _value(r: EvalReport, key: str) -> float:
    return float(np.mean(r.drift)) if key == "drift" else float(getattr(r, key))


def run_lambda_sweep(cfg: ExperimentConfig, lambdas: Sequence[float] | None = None, assets: Assets | None = None,
                     threads: int = 1) -> dict:
    """Coffee at each lambda plus the direct run of every (pair, seed)."""
    lambdas = sorted(float(x) for x in (lambdas if lambdas is not None else (cfg.lambda_sweep or [])))
    if not lambdas:
        raise ValueError("lambda sweep needs at least one value")
    if lambdas[0] < 0:
        raise ValueError("lambdas must be >= 0")
    assets = assets or load_assets(cfg)
    groups = tuple(cfg.trainable_groups)
    specs = [RunSpec(i, b, a, "coffee", s, lam, groups, cfg.dominant)
             for i, (b, a) in enumerate(cfg.concept_pairs) for lam in lambdas for s in cfg.seeds]
    specs += [RunSpec(i, b, a, "direct", s, 0.0, groups, cfg.dominant)
              for i, (b, a) in enumerate(cfg.concept_pairs) for s in cfg.seeds]
    reports = run_many(assets, cfg, specs, threads)
    coffee = [r for r in reports if r.method == "coffee"]
    direct = {(r.base, r.attribute, r.seed): r for r in reports if r.method == "direct"}
    table = []
    for lam in lambdas:
        rs = [r for r in coffee if r.lam == lam]
        row = {"lambda": lam, "highlight": lam == 1.0}
        for k in ("mcs_analog", "ffd_finetune", "ffd", "is_analog", "presence_rate", "drift"):
            row[k], row[k + "_se"] = _seed_stats(rs, k)
        if lam == 0.0:
            row["matches_direct"] = all(r.checkpoint_sha256 == direct[(r.base, r.attribute, r.seed)].checkpoint_sha256
                                        for r in rs)
        table.append(row)
    d_rows = list(direct.values())
    return {"lambdas": lambdas, "table": table,
            "direct": {k: _seed_stats(d_rows, k)[0] for k in ("mcs_analog", "ffd_finetune", "ffd", "is_analog")},
            "reports": [r.to_dict() for r in reports]}


PROTOCOLS = (("text_encoder",), ("denoiser",), ("denoiser", "text_encoder"))


def run_protocol_comparison(cfg: ExperimentConfig, assets: Assets | None = None, threads: int = 1) -> dict:
    """Direct fine-tuning under each trainable-group selection; deltas are
    relative to full fine-tuning."""
    assets = assets or load_assets(cfg)
    specs = [RunSpec(i, b, a, "direct", s, 0.0, g, cfg.dominant)
             for i, (b, a) in enumerate(cfg.concept_pairs) for g in PROTOCOLS for s in cfg.seeds]
    reports = run_many(assets, cfg, specs, threads)
    rows = {}
    for g in PROTOCOLS:
        rs = [r for r in reports if tuple(r.trainable_groups) == g]
        rows[g] = {"trainable_groups": list(g), "n_params": rs[0].n_trainable,
                   "is_analog": _mean([r.is_analog for r in rs]), "ffd": _mean([r.ffd for r in rs]),
                   "ffd_finetune": _mean([r.ffd_finetune for r in rs])}
    full = rows[PROTOCOLS[-1]]
    for row in rows.values():
        row["delta_params"] = format_delta(row["n_params"], full["n_params"])
        row["param_ratio"] = row["n_params"] / full["n_params"]
        row["delta_is"] = format_delta(row["is_analog"], full["is_analog"])
        row["delta_ffd"] = format_delta(row["ffd"], full["ffd"])
    return {"table": list(rows.values()), "reports": [r.to_dict() for r in reports]}


# --- output ----------------------------------------------------------------

def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path: str | Path, obj: Any) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dumps(obj), encoding="utf-8")
    return p


def write_summary_csv(path: str | Path, rows: Sequence[dict]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["method", *METRICS, "drift", *[f"delta_{k}" for k in METRICS]])
        for r in rows:
            deltas = r.get("difference_with_direct", {})
            w.writerow([r["method"], *[repr(r[k]) for k in METRICS], repr(r["drift"]),
                        *[deltas.get(k, "") for k in METRICS]])
    return p


def write_reports_csv(path: str | Path, reports: Sequence[EvalReport]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    cols = ["base", "attribute", "method", "seed", "lambda", "trainable_groups", *METRICS, "drift", "fingerprint"]
    with open(p, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in reports:
            d = r.to_dict()
            w.writerow([d["base"], d["attribute"], d["method"], d["seed"], repr(d["lambda"]),
                        "+".join(d["trainable_groups"]), *[repr(d[k]) for k in METRICS],
                        " ".join(map(repr, d["drift"])), d["fingerprint"]])
    return p


def write_sample_grid(path: str | Path, samples: np.ndarray, cols: int = 8) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(p, image_grid(samples, cols))
    return p
