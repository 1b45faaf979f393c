"""Command-line entry point: ``coffeelab <subcommand> [--config cfg.json]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import harness as H
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .coffee import METHODS, write_trace_csv
from .datagen import build_finetune_set, build_pretrain_corpus, save_dataset
from .diffusion import SamplerConfig, ddpm_sample
from .textenc import UnknownTokenError, snapshot_refs

log = logging.getLogger("coffeelab")

EXIT_OK, EXIT_USAGE, EXIT_CHECK = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config; unknown keys are rejected")
    p.add_argument("--seed", type=int, help="override the seed list (or the generator seed)")
    p.add_argument("--out", type=Path, help="output directory (defaults to the config's work_dir)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="coffeelab", description="Cosine-drift regularized fine-tuning on a toy diffusion model.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="write the pretraining corpus and fine-tuning sets")
    _common(p)
    p.add_argument("--pgm", action="store_true", help="also export one PGM per image")

    p = sub.add_parser("pretrain", help="train the denoiser and embedding table")
    _common(p)
    p = sub.add_parser("train-eval-head", help="train the frozen feature extractor")
    _common(p)

    p = sub.add_parser("finetune", help="fine-tune one (pair, method) and save the checkpoint and loss trace")
    _common(p)
    p.add_argument("--pair", required=True, help="base/attribute, e.g. circle/frame")
    p.add_argument("--method", choices=METHODS, default="coffee")
    p.add_argument("--lambda", dest="lam", type=float)

    p = sub.add_parser("sample", help="draw samples from a checkpoint into a PGM grid")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="model checkpoint (default: the pretrained one)")
    p.add_argument("--prompt", required=True)
    p.add_argument("--negative-prompt")
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("-n", type=int, default=16)

    for name, text in (("eval", "run every (pair, method, seed) and write reports"),
                       ("sweep", "coffee over the lambda grid"),
                       ("protocols", "direct fine-tuning per trainable-parameter group")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--build", action="store_true", help="train missing pretrained assets instead of failing")
        if name == "sweep":
            p.add_argument("--lambdas", type=float, nargs="+")

    p = sub.add_parser("report", help="run the full acceptance suite")
    _common(p)
    p.add_argument("--check", action="store_true", help=f"exit with {EXIT_CHECK} if any criterion fails")
    return ap


def _config(args, seed_target: str = "seeds") -> H.ExperimentConfig:
    cfg = H.ExperimentConfig.load(args.config) if args.config else H.ExperimentConfig()
    if args.seed is not None:
        if seed_target == "seeds":
            cfg = dataclasses.replace(cfg, seeds=[args.seed])
        elif seed_target == "pretrain":
            cfg.pretrain.seed = args.seed
        elif seed_target == "eval_head":
            cfg.eval_head.seed = args.seed
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _out(args, cfg: H.ExperimentConfig) -> Path:
    out = args.out or H.work_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_datagen(args) -> int:
    cfg = _config(args, "none")
    out = _out(args, cfg)
    seed = cfg.pretrain.corpus_seed if args.seed is None else args.seed
    print(save_dataset(out, build_pretrain_corpus(cfg.pretrain.corpus_size, seed), "pretrain", args.pgm))
    for base, attr in cfg.concept_pairs:
        imgs = build_finetune_set(base, attr, cfg.finetune.n_images, seed, dominant=cfg.dominant)
        print(save_dataset(out, imgs, f"finetune_{base}_{attr}", args.pgm))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args, "pretrain")
    if args.out:
        cfg.paths.work_dir = str(args.out)
    print(H.run_pretrain(cfg))
    return EXIT_OK


def cmd_train_eval_head(args) -> int:
    cfg = _config(args, "eval_head")
    if args.out:
        cfg.paths.work_dir = str(args.out)
    path = H.run_train_eval_head(cfg)
    rep = load_checkpoint(path).meta["report"]
    print(path)
    print(f"held-out accuracy {rep['heldout_acc']:.3f}, attribute AUCs {[round(a, 4) for a in rep['heldout_auc']]}")
    return EXIT_OK


def _pair(text: str) -> tuple[str, str]:
    parts = text.split("/")
    if len(parts) != 2:
        raise UsageError(f"--pair expects base/attribute, got {text!r}")
    return parts[0], parts[1]


def cmd_finetune(args) -> int:
    cfg = _config(args)
    base, attr = _pair(args.pair)
    cfg = dataclasses.replace(cfg, concept_pairs=[(base, attr)],
                              lam=cfg.lam if args.lam is None else args.lam)
    assets = H.load_assets(cfg, build=False)
    out = _out(args, cfg)
    seed = cfg.seeds[0]
    spec = H.RunSpec(0, base, attr, args.method, seed, cfg.lam, tuple(cfg.trainable_groups), cfg.dominant)
    report, res, samples = H.run_single(assets, cfg, spec, keep=True)
    stem = f"{base}_{attr}_{args.method}_seed{seed}"
    ck = H.model_checkpoint(res.net, res.table, assets.schedule, assets.pretrain_fp, seed,
                            {"method": args.method, "pair": [base, attr], "lambda": cfg.lam})
    save_checkpoint(out / f"{stem}.ckpt", ck)
    refs = snapshot_refs(base, [attr], assets.table)
    write_trace_csv(out / f"{stem}_trace.csv", res.trace, refs.undesired)
    H.write_sample_grid(out / f"{stem}_samples.pgm", samples[: cfg.n_eval_samples])
    H.write_json(out / f"{stem}_report.json", report.to_dict())
    print(f"{stem}: mcs {report.mcs_analog:+.3f} presence {report.presence_rate:.3f} drift {report.drift}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _config(args)
    if args.n < 1:
        raise UsageError("-n must be >= 1")
    path = args.checkpoint or H.pretrain_path(cfg)
    if not path.exists():
        raise H.MissingAssetError(f"no checkpoint at {path}; run `coffeelab pretrain` first")
    net, table, sch = H.model_from_checkpoint(load_checkpoint(path))
    scfg = SamplerConfig(guidance_scale=args.guidance, negative_prompt=args.negative_prompt, seed=cfg.seeds[0])
    samples = ddpm_sample(net, table, args.prompt, sch, scfg, n=args.n)
    out = _out(args, cfg)
    print(H.write_sample_grid(out / f"samples_{'_'.join(args.prompt.split())}.pgm", samples))
    return EXIT_OK


def _assets(args, cfg):
    return H.load_assets(cfg, build=getattr(args, "build", True))


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    reports = H.run_experiment(cfg, _assets(args, cfg), args.threads)
    rows = H.summarize(reports)
    H.write_json(out / "reports.json", {"config": cfg.to_dict(), "reports": [r.to_dict() for r in reports],
                                        "summary": rows})
    H.write_reports_csv(out / "reports.csv", reports)
    H.write_summary_csv(out / "summary.csv", rows)
    for r in rows:
        delta = r.get("difference_with_direct", {})
        print(f"{r['method']:17s} mcs {r['mcs_analog']:+.3f} ({delta.get('mcs_analog', '')}) "
              f"presence {r['presence_rate']:.3f} IS {r['is_analog']:.3f} ffd {r['ffd']:.2f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    sweep = H.run_lambda_sweep(cfg, args.lambdas, _assets(args, cfg), args.threads)
    H.write_json(out / "lambda_sweep.json", sweep)
    for row in sweep["table"]:
        mark = " *" if row["highlight"] else ""
        print(f"lambda {row['lambda']:<6g} mcs {row['mcs_analog']:+.3f} ffd(ft) {row['ffd_finetune']:.2f} "
              f"drift {row['drift']:.4f}{mark}")
    return EXIT_OK


def cmd_protocols(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    proto = H.run_protocol_comparison(cfg, _assets(args, cfg), args.threads)
    H.write_json(out / "protocols.json", proto)
    for row in proto["table"]:
        print(f"{'+'.join(row['trainable_groups']):24s} params {row['n_params']:>7d} ({row['delta_params']}) "
              f"IS {row['is_analog']:.3f} ({row['delta_is']}) ffd {row['ffd']:.2f} ({row['delta_ffd']})")
    return EXIT_OK


def cmd_report(args) -> int:
    from .acceptance import run_acceptance

    cfg = _config(args)
    out = _out(args, cfg)
    res = run_acceptance(cfg, args.threads)
    H.write_json(out / "acceptance.json", res.to_dict())
    H.write_summary_csv(out / "summary.csv", H.summarize(res.reports))
    for c in res.criteria:
        print(c.line())
    if args.check and not res.passed:
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"datagen": cmd_datagen, "pretrain": cmd_pretrain, "train-eval-head": cmd_train_eval_head,
            "finetune": cmd_finetune, "sample": cmd_sample, "eval": cmd_eval, "sweep": cmd_sweep,
            "protocols": cmd_protocols, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, H.ConfigError, H.MissingAssetError, CheckpointError, UnknownTokenError, ValueError) as e:
        print(f"coffeelab {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
