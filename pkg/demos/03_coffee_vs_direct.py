"""
Fine-tuning with and without the drift regularizer
==================================================

Ten images of a circle that all carry a frame are captioned just "circle".
Direct fine-tuning of the embedding table teaches the model that "circle"
means "framed circle". The regularizer keeps the cosine between the prompt
embedding and the "frame" embedding where it was before fine-tuning, so
the frame is learned elsewhere and plain "circle" prompts stay clean.
"""
from coffeelab import ExperimentConfig, load_assets
from coffeelab.harness import RunSpec, run_single

cfg = ExperimentConfig()
assets = load_assets(cfg)

for method in ("direct", "coffee"):
    spec = RunSpec(0, "circle", "frame", method, seed=0, lam=cfg.lam, groups=("text_encoder",))
    report, res, _ = run_single(assets, cfg, spec, keep=True)
    print(f"{method:7s} frame rate {report.presence_rate:.2f}  mcs {report.mcs_analog:+.3f}  "
          f"IS {report.is_analog:.3f}  drift {report.drift[0]:.4f}  "
          f"final diffusion loss {res.trace[-1].l_diffusion:.3f}")
