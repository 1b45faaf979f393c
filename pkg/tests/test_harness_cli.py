import json

import numpy as np
import pytest

from coffeelab import acceptance, cli
from coffeelab import harness as H
from coffeelab.acceptance import AcceptanceResult, Criterion, monotone_with_tolerance
from coffeelab.datagen import read_pgm
from coffeelab.harness import ConfigError, ExperimentConfig, format_delta


# --- config ------------------------------------------------------------------

def test_config_round_trip_and_lambda_key():
    cfg = ExperimentConfig.from_dict({"lambda": 2.5, "seeds": [4], "finetune": {"steps": 10}})
    d = cfg.to_dict()
    assert d["lambda"] == 2.5 and "lam" not in d
    assert ExperimentConfig.from_dict(json.loads(json.dumps(d))) == cfg


@pytest.mark.parametrize("bad", [{"lamda": 1}, {"finetune": {"stepz": 3}}, {"paths": {"dir": "x"}}])
def test_config_rejects_unknown_keys(bad):
    with pytest.raises(ConfigError, match="unknown keys"):
        ExperimentConfig.from_dict(bad)


@pytest.mark.parametrize("bad", [{"concept_pairs": [["circle", "glow"]]}, {"methods": ["lora"]}, {"seeds": []},
                                 {"lambda": -1}, {"trainable_groups": ["unet"]}, {"n_eval_samples": 8}])
def test_config_rejects_bad_values(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_fingerprint_ignores_paths_only():
    a = ExperimentConfig()
    b = ExperimentConfig.from_dict({"paths": {"work_dir": "/elsewhere"}})
    c = ExperimentConfig.from_dict({"lambda": 3.0})
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_format_delta():
    assert format_delta(50, 100) == "−50.00%"
    assert format_delta(150, 100) == "+50.00%"
    assert format_delta(1, 1) == "0.00%"
    assert format_delta(1, 0) == "n/a"
    assert format_delta(-1.5, -1.0) == "−50.00%"


def test_monotone_with_tolerance():
    assert monotone_with_tolerance([1, 2, 3], [0, 0, 0], True) == (True, 0)
    assert monotone_with_tolerance([1, 0.95, 3], [0.1, 0.1, 0.1], True)[0]
    assert not monotone_with_tolerance([1, 0.5, 3], [0.1, 0.1, 0.1], True)[0]


# --- runs on the pretrained assets ---------------------------------------------

@pytest.fixture(scope="module")
def quick_cfg(default_cfg):
    d = default_cfg.to_dict()
    d.update(concept_pairs=[["circle", "frame"], ["square", "stripe"]], methods=["direct", "coffee"],
             seeds=[0, 1], n_ffd_samples=40)
    d["finetune"]["steps"] = 5
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def quick_reports(assets, quick_cfg):
    return H.run_experiment(quick_cfg, assets)


def test_one_report_per_pair_method_seed(quick_reports):
    keys = [(r.pair, r.method, r.seed) for r in quick_reports]
    assert len(keys) == len(set(keys)) == 2 * 2 * 2
    direct = [r for r in quick_reports if r.method == "direct"]
    assert {(r.pair, r.seed) for r in direct} == {(p, s) for p in ("circle/frame", "square/stripe") for s in (0, 1)}


def test_report_fields(quick_reports, quick_cfg, assets):
    for r in quick_reports:
        assert r.n_samples == 16 and len(r.drift) == 1
        assert r.fingerprint == assets.pretrain_fp
        assert r.config_fingerprint == quick_cfg.fingerprint()
        assert r.l_reg_initial == 0.0
        assert r.lam == (1.0 if r.method == "coffee" else 0.0)
        assert r.inference_prompt == r.base and r.negative_prompt is None
        assert H.EvalReport.from_dict(json.loads(H.dumps(r.to_dict()))) == r


def test_summary_rows(quick_reports):
    rows = H.summarize(quick_reports)
    assert [r["method"] for r in rows] == ["direct", "coffee"]
    assert rows[0]["difference_with_direct"]["mcs_analog"] == "0.00%"
    assert rows[1]["n_runs"] == 4


def test_runs_are_reproducible(assets, quick_cfg):
    spec = H.RunSpec(0, "circle", "frame", "coffee", 0, 1.0, ("text_encoder",))
    a, _, _ = H.run_single(assets, quick_cfg, spec)
    b, _, _ = H.run_single(assets, quick_cfg, spec)
    assert H.dumps(a.to_dict()) == H.dumps(b.to_dict())


def test_steering_prompts(assets, quick_cfg):
    assert H.inference_prompts("concept_removal", "circle", "frame") == ("circle without frame", None)
    assert H.inference_prompts("neg_prompt_both", "circle", "frame") == ("circle", "frame")
    spec = H.RunSpec(0, "circle", "frame", "neg_prompt_infer", 0, 0.0, ("text_encoder",))
    r = H.evaluate_model(assets, quick_cfg, spec, assets.net, assets.table)
    assert r.negative_prompt == "frame" and r.guidance_scale == 3.0


def test_protocol_parameter_counts(assets, quick_cfg):
    import dataclasses
    cfg = dataclasses.replace(quick_cfg, concept_pairs=[("circle", "frame")], seeds=[0])
    proto = H.run_protocol_comparison(cfg, assets)
    n = {tuple(r["trainable_groups"]): r["n_params"] for r in proto["table"]}
    assert n[("text_encoder",)] == 10 * 32
    assert n[("denoiser",)] == assets.net.n_params()
    assert n[("denoiser", "text_encoder")] == assets.net.n_params() + 320


# --- CLI -------------------------------------------------------------------------

def write_cfg(path, work_dir, **extra):
    d = {"paths": {"work_dir": str(work_dir)}, **extra}
    path.write_text(json.dumps(d))
    return str(path)


def test_cli_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["finetune"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == 1


def test_cli_bad_config_exits_1(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["eval", "--config", str(p)]) == 1
    assert "unknown keys" in capsys.readouterr().err


def test_cli_missing_assets_exit_1(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", tmp_path / "empty")
    assert cli.main(["eval", "--config", cfg]) == 1
    assert "coffeelab pretrain" in capsys.readouterr().err


def test_cli_datagen(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", tmp_path, pretrain={"corpus_size": 320},
                    concept_pairs=[["circle", "frame"]])
    assert cli.main(["datagen", "--config", cfg, "--out", str(tmp_path / "d"), "--pgm"]) == 0
    manifest = json.loads((tmp_path / "d" / "pretrain.json").read_text())
    assert len(manifest["items"]) == 320
    assert (tmp_path / "d" / "finetune_circle_frame_0009.pgm").exists()


def test_cli_sample(default_cfg, assets, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", default_cfg.paths.work_dir)
    code = cli.main(["sample", "--config", cfg, "--prompt", "circle frame", "-n", "3", "--out", str(tmp_path)])
    assert code == 0
    grid = read_pgm(tmp_path / "samples_circle_frame.pgm")
    assert grid.shape == (16, 8 * 17 - 1)  # fixed 8-column grid
    assert cli.main(["sample", "--config", cfg, "--prompt", "hexagon", "--out", str(tmp_path)]) == 1


def test_cli_finetune_writes_outputs(default_cfg, assets, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", default_cfg.paths.work_dir, finetune={"steps": 3}, seeds=[0])
    assert cli.main(["finetune", "--config", cfg, "--pair", "circle/frame", "--out", str(tmp_path)]) == 0
    stem = tmp_path / "circle_frame_coffee_seed0"
    assert all((tmp_path / f"circle_frame_coffee_seed0{s}").exists()
               for s in (".ckpt", "_trace.csv", "_samples.pgm", "_report.json"))
    assert len(stem.with_name(stem.name + "_trace.csv").read_text().splitlines()) == 4
    assert cli.main(["finetune", "--config", cfg, "--pair", "circle-frame"]) == 1


@pytest.mark.parametrize("passed,check,code", [(True, True, 0), (False, True, 2), (False, False, 0)])
def test_cli_report_exit_codes(monkeypatch, tmp_path, capsys, passed, check, code):
    result = AcceptanceResult([Criterion(1, "stub", passed, "detail")], [], {}, {}, [])
    monkeypatch.setattr(acceptance, "run_acceptance", lambda cfg, threads: result)
    cfg = write_cfg(tmp_path / "c.json", tmp_path)
    argv = ["report", "--config", cfg] + (["--check"] if check else [])
    assert cli.main(argv) == code
    out = capsys.readouterr().out
    assert ("[PASS]" if passed else "[FAIL]") in out
    assert json.loads((tmp_path / "acceptance.json").read_text())["passed"] is passed


def test_sample_grid_written(tmp_path):
    p = H.write_sample_grid(tmp_path / "g.pgm", np.zeros((9, 256), np.float32))
    assert read_pgm(p).shape == (2 * 17 - 1, 8 * 17 - 1)
