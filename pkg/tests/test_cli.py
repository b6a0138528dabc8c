import csv
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from mmlip import cli
from mmlip import config as cfgmod
from mmlip.autoencoder import snapshot
from mmlip.autoencoder.mlp import MlpSpec
from mmlip.autoencoder.model import ModelFusion, ModelSpec, MultimodalAutoencoder
from mmlip.fusion import FusionMethod
from mmlip.synthdata import SyntheticSpec, generate

FAST = {
    "training": {"epochs": 2, "trials": 1, "lipschitz_every": 1, "lipschitz_pairs": 64},
    "estimation": {"n_samples": 512},
}


def _write_cfg(path: Path, overrides: dict) -> Path:
    path.write_text(yaml.safe_dump(overrides))
    return path


def _run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _outputs(root: Path) -> dict:
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix in (".csv", ".jsonl", ".yaml", ".snap")}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = _write_cfg(root / "cfg.yaml", FAST)
    assert _run("train", "--config", cfg, "--out", root / "out") == 0
    return root, cfg


def test_gen_data_defaults(tmp_path, capsys):
    assert _run("gen-data", "--out", tmp_path) == 0
    assert "80 samples (16 test)" in capsys.readouterr().out
    rows = (tmp_path / "data" / "modality_0.csv").read_text().splitlines()
    assert len(rows) == 81


def test_gen_data_is_byte_identical(tmp_path):
    _run("gen-data", "--out", tmp_path / "a")
    _run("gen-data", "--out", tmp_path / "b")
    assert _outputs(tmp_path / "a") == _outputs(tmp_path / "b")


def test_unknown_key_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("training:\n  epochs: 3\n  bogus: 1\n")
    assert _run("gen-data", "--config", cfg, "--out", tmp_path) == 2
    err = capsys.readouterr().err
    assert "training.bogus" in err and ":3" in err


def test_bad_value_is_config_error(tmp_path):
    cfg = _write_cfg(tmp_path / "c.yaml", {"dataset": {"n_samples": 10}})
    assert _run("gen-data", "--config", cfg, "--out", tmp_path) == 2


def test_missing_snapshot_is_runtime_error(tmp_path):
    assert _run("bounds", tmp_path / "none.snap", "--out", tmp_path) == 1


def test_console_script_exit_code(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("nonsense_section: {}\n")
    res = subprocess.run([sys.executable, "-m", "mmlip.cli", "gen-data", "--config", str(cfg),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 2


def test_train_outputs(trained):
    root, _ = trained
    out = root / "out" / "train"
    for fusion in ("sum", "concat", "attention"):
        lines = (out / fusion / "trial0.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert (out / fusion / "trial0.snap").exists()
    summary = _read_csv(out / "summary.csv")
    assert {r["fusion"] for r in summary} == {"sum", "concat", "attention"}
    assert "model_lipschitz_std" in summary[0]
    assert len(_read_csv(out / "final.csv")) == 3


def test_one_epoch_one_line(tmp_path):
    cfg = _write_cfg(tmp_path / "c.yaml", {"training": {"epochs": 1, "trials": 1, "lipschitz_pairs": 32},
                                           "model": {"fusions": ["sum"]}})
    assert _run("train", "--config", cfg, "--out", tmp_path) == 0
    assert len((tmp_path / "train" / "sum" / "trial0.jsonl").read_text().splitlines()) == 1


def test_train_is_byte_identical(trained, tmp_path):
    root, cfg = trained
    assert _run("train", "--config", cfg, "--out", tmp_path) == 0
    assert _outputs(root / "out" / "train") == _outputs(tmp_path / "train")


def test_effective_config_round_trip(trained, tmp_path):
    root, _ = trained
    eff = root / "out" / "config.effective.yaml"
    assert cfgmod.load(eff) == cfgmod.load(root / "cfg.yaml")
    assert _run("train", "--config", eff, "--out", tmp_path) == 0
    assert _outputs(root / "out" / "train") == _outputs(tmp_path / "train")


def test_seed_override_changes_output(trained, tmp_path):
    root, cfg = trained
    assert _run("train", "--config", cfg, "--out", tmp_path, "--seed-override", 17) == 0
    assert (tmp_path / "train" / "sum" / "trial0.jsonl").read_bytes() != \
        (root / "out" / "train" / "sum" / "trial0.jsonl").read_bytes()


def test_bounds_and_estimates_are_consistent(trained, tmp_path):
    root, cfg = trained
    for fusion in ("sum", "concat", "attention"):
        snap = root / "out" / "train" / fusion / "trial0.snap"
        out = tmp_path / fusion
        assert _run("bounds", snap, "--config", cfg, "--out", out) == 0
        assert _run("estimate", snap, "--config", cfg, "--out", out) == 0
        bounds = {(r["quantity"], r["target"]): r for r in _read_csv(out / "bounds.csv")}
        ests = _read_csv(out / "estimates.csv")
        for e in ests:
            if e["statistic"] == "function":
                b = bounds[("mlp_func_lipschitz", e["submodel"])]
                assert float(b["value"]) >= float(e["value"])
        # gradient bounds need user constants, so they are flagged rather than guessed
        assert bounds[("decoder_grad_bound", "decoder0")]["status"] == "requires-parameter"


def test_bounds_with_constants(trained, tmp_path):
    root, _ = trained
    cfg = _write_cfg(tmp_path / "c.yaml", {**FAST, "bounds": {"l_dec_grad": 2.0, "l_agg_grad": [1.0, 1.5]}})
    assert _run("bounds", root / "out" / "train" / "attention" / "trial0.snap", "--config", cfg,
                "--out", tmp_path) == 0
    rows = _read_csv(tmp_path / "bounds.csv")
    assert all(r["status"] == "ok" for r in rows)
    grads = [float(r["value"]) for r in rows if r["quantity"].endswith("_grad_bound")]
    assert grads and all(v > 0 for v in grads)


def _linear_model(scales, d=3):
    n = len(scales)
    spec = ModelSpec(tuple(MlpSpec((d, d), ()) for _ in range(n)),
                     ModelFusion(FusionMethod.SUM if n == 1 else FusionMethod.CONCAT))
    params = {}
    for i, s in enumerate(scales):
        params[f"enc{i}.W0"] = s * np.eye(d)
        params[f"enc{i}.b0"] = np.zeros(d)
        params[f"dec{i}.W0"] = np.eye(d, n * d) if n > 1 else np.eye(d)
        params[f"dec{i}.b0"] = np.zeros(d)
    return MultimodalAutoencoder(spec, params)


def test_identity_model_constants_are_one(tmp_path):
    ds_spec = SyntheticSpec(modality_dims=(3,), temporal_modality=None)
    snap = snapshot.save(_linear_model([1.0]), tmp_path / "id.snap", {"dataset": ds_spec.to_dict()})
    assert _run("bounds", snap, "--out", tmp_path) == 0
    rows = {(r["quantity"], r["target"]): float(r["value"]) for r in _read_csv(tmp_path / "bounds.csv")
            if r["value"]}
    for key in [("mlp_func_lipschitz", "encoder0"), ("mlp_func_lipschitz", "decoder0"),
                ("aggregation_concat", "encoders"), ("aggregation_sum", "encoders"),
                ("fusion_lipschitz", "fusion")]:
        assert rows[key] == pytest.approx(1.0, rel=1e-9), key


def test_encoder_constants_3_4_aggregate_to_5_and_7():
    model = _linear_model([3.0, 4.0])
    ds = generate(SyntheticSpec(modality_dims=(3, 3), temporal_modality=None))
    rows = {(r["quantity"], r["target"]): r["value"]
            for r in cli.bound_rows(model, list(ds.modalities), cfgmod.load(None))}
    assert rows[("aggregation_concat", "encoders")] == pytest.approx(5.0, rel=1e-9)
    assert rows[("aggregation_sum", "encoders")] == pytest.approx(7.0, rel=1e-9)


def test_linear_encoder_gradient_estimate_is_zero():
    model = _linear_model([2.0, 0.5])
    ds = generate(SyntheticSpec(modality_dims=(3, 3), temporal_modality=None))
    cfg = cfgmod.load(None)
    cfg["estimation"]["n_samples"] = 256
    rows = cli.estimate_rows(model, list(ds.modalities), cfg)
    grads = [r for r in rows if r["statistic"] == "gradient"]
    assert all(r["value"] == 0.0 for r in grads)


def test_self_test(tmp_path):
    assert _run("estimate", "--self-test", "--out", tmp_path) == 0
    row = _read_csv(tmp_path / "self_test.csv")[0]
    assert abs(float(row["value"]) - 1.0) <= 1e-12


def test_estimate_needs_snapshot(tmp_path):
    assert _run("estimate", "--out", tmp_path) == 2


def test_doubling_n_never_decreases_estimates(trained, tmp_path):
    root, _ = trained
    snap = root / "out" / "train" / "concat" / "trial0.snap"
    vals = []
    for n in (300, 600):
        cfg = _write_cfg(tmp_path / f"c{n}.yaml", {"estimation": {"n_samples": n}})
        assert _run("estimate", snap, "--config", cfg, "--out", tmp_path / str(n)) == 0
        vals.append([float(r["value"]) for r in _read_csv(tmp_path / str(n) / "estimates.csv")])
    assert all(b >= a for a, b in zip(*vals))


def test_ablation_rows_and_lambda_zero_consistency(tmp_path):
    over = {"training": {"epochs": 3, "trials": 1, "lipschitz_pairs": 64, "lambda_reg": 0.0},
            "model": {"fusions": ["attention"]}, "ablation": {"lambdas": [0.0, 1e-1, 1e1]}}
    cfg_path = _write_cfg(tmp_path / "c.yaml", over)
    assert _run("ablate", "--config", cfg_path, "--out", tmp_path) == 0
    rows = _read_csv(tmp_path / "ablation.csv")
    assert [float(r["lambda"]) for r in rows] == [0.0, 0.1, 10.0]
    assert _run("train", "--config", cfg_path, "--out", tmp_path) == 0
    final = _read_csv(tmp_path / "train" / "final.csv")[0]
    assert rows[0]["final_model_lipschitz"] == final["final_model_lipschitz"]
    assert rows[0]["final_loss"] == final["final_combined_loss"]


def test_ablate_is_byte_identical(tmp_path):
    over = {"training": {"epochs": 2, "lipschitz_pairs": 32}, "ablation": {"lambdas": [1e-5, 1e-1]}}
    cfg = _write_cfg(tmp_path / "c.yaml", over)
    _run("ablate", "--config", cfg, "--out", tmp_path / "a")
    _run("ablate", "--config", cfg, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "ablation.csv").read_bytes() == (tmp_path / "b" / "ablation.csv").read_bytes()


def test_detect_outputs(trained, tmp_path):
    root, cfg = trained
    snap = root / "out" / "train" / "attention" / "trial0.snap"
    assert _run("detect", snap, "--config", cfg, "--out", tmp_path / "a") == 0
    assert _run("detect", snap, "--config", cfg, "--out", tmp_path / "b") == 0
    assert _outputs(tmp_path / "a") == _outputs(tmp_path / "b")
    summary = yaml.safe_load((tmp_path / "a" / "detection_summary.yaml").read_text())
    assert summary["tp"] + summary["fp"] + summary["tn"] + summary["fn"] == summary["n_samples"] == 16


def test_detect_without_faults(trained, tmp_path):
    root, _ = trained
    cfg = _write_cfg(tmp_path / "c.yaml", {"detection": {"fault": {"fraction": 0.0}}})
    assert _run("detect", root / "out" / "train" / "sum" / "trial0.snap", "--config", cfg, "--out", tmp_path) == 0
    summary = yaml.safe_load((tmp_path / "detection_summary.yaml").read_text())
    assert summary["tp"] == 0 and summary["fn"] == 0


def test_defaults_command(capsys):
    assert _run("defaults") == 0
    assert yaml.safe_load(capsys.readouterr().out) == cfgmod.DEFAULTS


@pytest.mark.slow
def test_ablation_norm_falls_on_coarse_grid(tmp_path):
    cfg = _write_cfg(tmp_path / "c.yaml", {"ablation": {"lambdas": [1e-9, 1e-5, 1.0]}})
    assert _run("ablate", "--config", cfg, "--out", tmp_path) == 0
    norms = [float(r["param_norm"]) for r in _read_csv(tmp_path / "ablation.csv")]
    assert norms[0] >= norms[1] >= norms[2]
