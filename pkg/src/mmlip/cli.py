"""Command-line experiment runner.

Subcommands: gen-data, train, bounds, estimate, ablate, detect. Exit status
is 0 on success, 1 on a runtime failure and 2 on a configuration error.

Output columns
--------------
train/summary.csv   fusion, epoch, trials, diverged_trials, then
                    <series>_{mean,std,min,max} for combined_loss,
                    train_loss_<i>, test_loss_<i> and model_lipschitz
train/final.csv     fusion, trial, epochs_run, initial_loss,
                    final_combined_loss, final_model_lipschitz, diverged
bounds.csv          quantity, target, value, status, note
estimates.csv       submodel, statistic, value, pairs_evaluated,
                    pairs_skipped, domain
ablation.csv        lambda, trials, final_model_lipschitz, final_loss,
                    param_norm
detections.csv      index, score, predicted_faulty, true_faulty
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import warnings
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import spearmanr

from . import config as cfgmod
from .anomaly import Kernel, detect, fit
from .autoencoder import snapshot
from .autoencoder.mlp import MlpSpec
from .autoencoder.model import ModelFusion, ModelSpec, MultimodalAutoencoder
from .autoencoder.train import TrainConfig, summarize, train_trials
from .bounds import (
    DecoderBoundInputs,
    EncoderBoundInputs,
    aggregation_bounds,
    attention_func_bound,
    attention_grad_bound,
    decoder_grad_bound,
    default_attention_grad_constant,
    encoder_grad_bound,
    max_norm,
    mlp_func_lipschitz,
)
from .errors import InvalidSpecError, MmlipError
from .estimator import (
    SamplingDomain,
    estimate_function_lipschitz,
    estimate_gradient_lipschitz,
    estimate_model_lipschitz,
)
from .fusion import FusionMethod, spectrally_normalize
from .synthdata import FaultSpec, SyntheticSpec, generate, inject_faults, save_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
SELF_TEST_DIM = 3


# -- small IO helpers ------------------------------------------------------------


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(h)) for h in header])
    return buf.getvalue()


def _say(msg: str):
    print(msg, flush=True)


# -- config to domain objects ------------------------------------------------------


def dataset_spec(cfg: dict) -> SyntheticSpec:
    return SyntheticSpec(**cfg["dataset"])


def model_spec(cfg: dict, dims, method) -> ModelSpec:
    m = cfg["model"]
    hidden = tuple(int(h) for h in m["hidden_widths"])
    encs = tuple(MlpSpec((int(p),) + hidden + (int(m["latent_dim"]),), m["activation"]) for p in dims)
    att = m["attention"]
    fusion = ModelFusion(
        method=FusionMethod(method),
        unit_norm_inputs=att["unit_norm_inputs"],
        spectral_normalize=att["spectral_normalize"],
        scale_by_sqrt_d=att["scale_by_sqrt_d"],
        lambda_reg=cfg["training"]["lambda_reg"],
        attention_layers=att["layers"],
    )
    return ModelSpec(encs, fusion)


def train_config(cfg: dict, **override) -> TrainConfig:
    return TrainConfig(**{**cfg["training"], **override})


def _dataset_for_snapshot(meta: dict, cfg: dict):
    spec_dict = meta.get("dataset") or cfg["dataset"]
    return generate(SyntheticSpec(**spec_dict))


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(cfg: dict, out: Path) -> int:
    ds = generate(dataset_spec(cfg))
    save_dataset(ds, out / "data")
    write_atomic(out / "config.effective.yaml", cfgmod.dump(cfg))
    _say(f"wrote {ds.n_samples} samples ({int(ds.is_test.sum())} test) with dims {ds.dims} to {out / 'data'}")
    return EXIT_OK


FINAL_COLUMNS = ["fusion", "trial", "epochs_run", "initial_loss", "final_combined_loss",
                 "final_model_lipschitz", "diverged"]


def _final_row(log) -> dict:
    last = log.records[-1] if log.records else None
    return {
        "fusion": log.fusion,
        "trial": log.trial,
        "epochs_run": len(log.records),
        "initial_loss": log.initial_loss,
        "final_combined_loss": None if last is None else last.combined_loss,
        "final_model_lipschitz": log.final_model_lipschitz(),
        "diverged": log.diverged,
    }


def cmd_train(cfg: dict, out: Path, strict: bool = False) -> int:
    ds = generate(dataset_spec(cfg))
    tcfg = train_config(cfg)
    summary_rows, final_rows = [], []
    diverged_any = False
    for method in cfg["model"]["fusions"]:
        spec = model_spec(cfg, ds.dims, method)
        logs = train_trials(spec, None, ds, tcfg)
        n_div = sum(lg.diverged for lg in logs)
        diverged_any |= n_div > 0
        for lg in logs:
            base = out / "train" / lg.fusion / f"trial{lg.trial}"
            write_atomic(base.with_suffix(".jsonl"), lg.to_jsonl())
            meta = {"dataset": ds.spec.to_dict(), "fusion": lg.fusion, "trial": lg.trial,
                    "seed": tcfg.seed, "diverged": lg.diverged}
            base.parent.mkdir(parents=True, exist_ok=True)
            lg.snapshot = str(snapshot.save(lg.model, base.with_suffix(".snap"), meta))
            final_rows.append(_final_row(lg))
            if lg.diverged:
                _say(f"warning: {lg.fusion} trial {lg.trial} diverged: {lg.message}")
        for row in summarize(logs):
            summary_rows.append({"fusion": FusionMethod(method).value, "diverged_trials": n_div, **row})
        fin = [r["final_model_lipschitz"] for r in final_rows if r["fusion"] == FusionMethod(method).value]
        fin = [v for v in fin if v is not None]
        if fin:
            _say(f"{FusionMethod(method).value}: mean final model Lipschitz {np.mean(fin):.6g} over {len(fin)} trial(s)")
    header = ["fusion", "epoch", "trials", "diverged_trials"]
    extra = []
    for r in summary_rows:
        for k in r:
            if k not in header and k not in extra:
                extra.append(k)
    write_atomic(out / "train" / "summary.csv", csv_text(header + extra, summary_rows))
    write_atomic(out / "train" / "final.csv", csv_text(FINAL_COLUMNS, final_rows))
    write_atomic(out / "config.effective.yaml", cfgmod.dump(cfg))
    if diverged_any and strict:
        _say("error: at least one trial diverged (--strict)")
        return EXIT_RUNTIME
    return EXIT_OK


def _per_item(value, n: int, name: str):
    if value is None:
        return [None] * n
    if isinstance(value, list):
        if len(value) != n:
            raise cfgmod.ConfigError(f"'bounds.{name}' needs {n} entries, got {len(value)}")
        return [float(v) for v in value]
    return [float(value)] * n


def _fusion_block_jacobian_norms(model: MultimodalAutoencoder, latents: list, k: int, step: float = 1e-6) -> np.ndarray:
    """Per-sample spectral norm of d(fused)/d(latent k); exact for sum and concat, central differences for attention."""
    b = latents[0].shape[0]
    if model.spec.fusion.method is not FusionMethod.ATTENTION:
        return np.ones(b)
    dk = latents[k].shape[1]
    cols = []
    for j in range(dk):
        plus = [z.copy() for z in latents]
        minus = [z.copy() for z in latents]
        plus[k][:, j] += step
        minus[k][:, j] -= step
        cols.append((model.fuse_latents(plus) - model.fuse_latents(minus)) / (2 * step))
    jac = np.stack(cols, axis=2)  # (batch, fused, d_k)
    return np.linalg.svd(jac, compute_uv=False)[:, 0]


def bound_rows(model: MultimodalAutoencoder, inputs: list, cfg: dict) -> list[dict]:
    rows = []

    def add(quantity, target, value, status="ok", note=""):
        rows.append({"quantity": quantity, "target": target, "value": value, "status": status, "note": note})

    n = model.n
    enc_l = [e.lipschitz_upper() for e in model.encoders]
    dec_l = [d.lipschitz_upper() for d in model.decoders]
    for i, v in enumerate(enc_l):
        add("mlp_func_lipschitz", f"encoder{i}", v)
    for i, v in enumerate(dec_l):
        add("mlp_func_lipschitz", f"decoder{i}", v)
    l_concat, l_sum = aggregation_bounds(enc_l)
    add("aggregation_concat", "encoders", l_concat)
    add("aggregation_sum", "encoders", l_sum)

    c_input = max_norm(np.hstack(inputs))
    add("input_norm_C", "data", c_input, note="max norm of the stacked modality inputs")
    latents = model.encode(inputs)
    u = model.fused(inputs)
    f = model.spec.fusion

    if f.method is FusionMethod.ATTENTION:
        chains = model.attention_chains()
        if f.spectral_normalize:
            chains = [[spectrally_normalize(w) for w in c] for c in chains]
        m_max = max(mlp_func_lipschitz(c, [1.0] * len(c)) for c in chains)
        if f.unit_norm_inputs:
            r_max = 1.0
            r_min = min(float(np.min(np.linalg.norm(z, axis=1))) for z in latents)
        else:
            r_max = max(max_norm(z) for z in latents)
        add("attention_M", "fusion", m_max, note="max Lipschitz of the per-modality attention chains")
        add("attention_R", "fusion", r_max, note="max norm of attention inputs")
        l_att = attention_func_bound(m_max, r_max)
        add("attention_func_bound", "fusion", l_att)
        c_given = cfg["bounds"]["attention_grad_constant"]
        c_n = default_attention_grad_constant(n) if c_given is None else float(c_given)
        add("attention_grad_bound", "fusion", attention_grad_bound(c_n, m_max, r_max),
            note=f"C_n={c_n!r} ({'default 4n' if c_given is None else 'configured'})")
        l_agg = l_att
        if f.scale_by_sqrt_d:
            l_agg /= np.sqrt(model.spec.latent_dims[0])
        if f.unit_norm_inputs:
            l_agg *= 2.0 / r_min
        add("fusion_lipschitz", "fusion", l_agg,
            note="attention bound with sqrt(d) scaling and 2/r_min for the unit-norm step")
    else:
        l_agg = 1.0
        add("fusion_lipschitz", "fusion", l_agg, note="per-block Lipschitz of sum/concat")

    l_enc = max(enc_l)
    dec_grad = _per_item(cfg["bounds"]["l_dec_grad"], n, "l_dec_grad")
    agg_grad = _per_item(cfg["bounds"]["l_agg_grad"], n, "l_agg_grad")
    for i, dec in enumerate(model.decoders):
        b_grad = float(np.max(dec.param_jacobian_norm(u)))
        add("B_grad", f"decoder{i}", b_grad, note="max per-sample norm of d(output)/d(params)")
        if dec_grad[i] is None:
            add("decoder_grad_bound", f"decoder{i}", None, "requires-parameter", "set bounds.l_dec_grad")
        else:
            add("decoder_grad_bound", f"decoder{i}", decoder_grad_bound(
                DecoderBoundInputs(b_grad, dec_l[i], dec_grad[i], c_input, l_agg, l_enc)))
    for k, enc in enumerate(model.encoders):
        jn = _fusion_block_jacobian_norms(model, [np.array(z) for z in latents], k)
        b_agg = float(np.max(jn * enc.param_jacobian_norm(inputs[k])))
        add("B_agg", f"encoder{k}", b_agg, note="max per-sample ||d fused/d latent|| * ||d latent/d params||")
        if agg_grad[k] is None or any(g is None for g in dec_grad):
            add("encoder_grad_bound", f"encoder{k}", None, "requires-parameter",
                "set bounds.l_dec_grad and bounds.l_agg_grad")
        else:
            add("encoder_grad_bound", f"encoder{k}", encoder_grad_bound(
                EncoderBoundInputs(tuple(zip(dec_l, dec_grad)), b_agg, l_agg, agg_grad[k], c_input)))
    return rows


def cmd_bounds(snapshot_path: Path, cfg: dict, out: Path) -> int:
    model, meta = snapshot.load(snapshot_path)
    ds = _dataset_for_snapshot(meta, cfg)
    rows = bound_rows(model, list(ds.train().modalities), cfg)
    text = csv_text(["quantity", "target", "value", "status", "note"], rows)
    write_atomic(out / "bounds.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def _self_test(cfg: dict, out: Path) -> int:
    est = cfg["estimation"]
    dom = SamplingDomain(SELF_TEST_DIM, est["low"], est["high"])
    # f(x) = 0.5 |x|^2 has gradient x, so every sampled ratio is exactly 1
    res = estimate_gradient_lipschitz(lambda x: x, dom, est["n_samples"], est["epsilon"], est["seed"], batched=True)
    row = {"submodel": "quadratic", "statistic": "gradient", "value": res.value,
           "pairs_evaluated": res.pairs_evaluated, "pairs_skipped": res.pairs_skipped, "domain": "box"}
    text = csv_text(list(row), [row])
    write_atomic(out / "self_test.csv", text)
    sys.stdout.write(text)
    return EXIT_OK if abs(res.value - 1.0) <= 1e-12 else EXIT_RUNTIME


def estimate_rows(model: MultimodalAutoencoder, inputs: list, cfg: dict) -> list[dict]:
    est = cfg["estimation"]
    if est["domain"] not in ("data", "box"):
        raise cfgmod.ConfigError("estimation.domain must be 'data' or 'box'")
    u = model.fused(inputs)
    parts = [(f"encoder{i}", e, inputs[i]) for i, e in enumerate(model.encoders)]
    parts += [(f"decoder{i}", d, u) for i, d in enumerate(model.decoders)]
    seeds = np.random.SeedSequence(est["seed"]).generate_state(len(parts))
    rows = []
    for (name, part, data), seed in zip(parts, seeds):
        for stat in ("function", "gradient"):
            if est["domain"] == "data":
                res = estimate_model_lipschitz(part, data, est["n_samples"], est["epsilon"], int(seed), statistic=stat)
            else:
                dom = SamplingDomain(part.in_dim, est["low"], est["high"])
                fn = part.forward if stat == "function" else part.input_jacobian
                runner = estimate_function_lipschitz if stat == "function" else estimate_gradient_lipschitz
                res = runner(fn, dom, est["n_samples"], est["epsilon"], int(seed), batched=True)
            rows.append({"submodel": name, "statistic": stat, "value": res.value,
                         "pairs_evaluated": res.pairs_evaluated, "pairs_skipped": res.pairs_skipped,
                         "domain": est["domain"]})
    return rows


def cmd_estimate(snapshot_path, cfg: dict, out: Path, self_test: bool = False) -> int:
    if self_test:
        return _self_test(cfg, out)
    if snapshot_path is None:
        raise cfgmod.ConfigError("estimate needs a snapshot unless --self-test is given")
    model, meta = snapshot.load(snapshot_path)
    ds = _dataset_for_snapshot(meta, cfg)
    rows = estimate_rows(model, list(ds.train().modalities), cfg)
    text = csv_text(["submodel", "statistic", "value", "pairs_evaluated", "pairs_skipped", "domain"], rows)
    write_atomic(out / "estimates.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def ablation_rows(cfg: dict, ds=None) -> list[dict]:
    lambdas = cfg["ablation"]["lambdas"]
    if not lambdas:
        raise cfgmod.ConfigError("ablation.lambdas is empty")
    ds = generate(dataset_spec(cfg)) if ds is None else ds
    rows = []
    for lam in lambdas:
        lam = float(lam)
        tcfg = train_config(cfg, lambda_reg=lam)
        spec = model_spec(cfg, ds.dims, FusionMethod.ATTENTION)
        logs = train_trials(spec, None, ds, tcfg)
        ok = [lg for lg in logs if not lg.diverged and lg.records]
        lips = [lg.final_model_lipschitz() for lg in ok]
        rows.append({
            "lambda": lam,
            "trials": len(ok),
            "final_model_lipschitz": float(np.mean(lips)) if lips else None,
            "final_loss": float(np.mean([lg.records[-1].combined_loss for lg in ok])) if ok else None,
            "param_norm": float(np.mean([lg.model.total_param_norm() for lg in logs])),
        })
    return rows


def cmd_ablate(cfg: dict, out: Path, strict: bool = False) -> int:
    rows = ablation_rows(cfg)
    text = csv_text(["lambda", "trials", "final_model_lipschitz", "final_loss", "param_norm"], rows)
    write_atomic(out / "ablation.csv", text)
    sys.stdout.write(text)
    lam = [r["lambda"] for r in rows if r["final_model_lipschitz"] is not None]
    lip = [r["final_model_lipschitz"] for r in rows if r["final_model_lipschitz"] is not None]
    if len(lam) >= 2:
        rho = spearmanr(lam, lip).statistic
        _say(f"spearman(lambda, final Lipschitz) = {rho:.4f}")
    if strict and any(r["trials"] < cfg["training"]["trials"] for r in rows):
        _say("error: at least one trial diverged (--strict)")
        return EXIT_RUNTIME
    return EXIT_OK


def detection_report(model: MultimodalAutoencoder, ds, cfg: dict):
    det = cfg["detection"]
    tr = ds.train()
    clean = tr.subset(~tr.faulty)
    kernel = Kernel(det["kernel"], det["gamma"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        am = fit(model.fused(list(clean.modalities)), kernel, det["k_components"])
    faulted = inject_faults(ds, FaultSpec(**det["fault"]), candidates=ds.is_test).test()
    return am, detect(am, model.fused(list(faulted.modalities)), faulted.faulty)


def cmd_detect(snapshot_path: Path, cfg: dict, out: Path) -> int:
    model, meta = snapshot.load(snapshot_path)
    ds = _dataset_for_snapshot(meta, cfg)
    _, report = detection_report(model, ds, cfg)
    write_atomic(out / "detections.csv", report.to_csv())
    summary = yaml.safe_dump(report.summary(), sort_keys=False)
    write_atomic(out / "detection_summary.yaml", summary)
    sys.stdout.write(summary)
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmlip", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, snapshot_arg=False):
        if snapshot_arg:
            sp.add_argument("snapshot", nargs="?", type=Path, help="model snapshot written by 'train'")
        sp.add_argument("--config", type=Path, default=None, help="YAML config; omitted keys take defaults")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        sp.add_argument("--seed-override", type=int, default=None, help="replace every seed in the config")
        sp.add_argument("--strict", action="store_true", help="exit 1 if any training trial diverges")
        return sp

    common(sub.add_parser("gen-data", help="generate the synthetic dataset"))
    common(sub.add_parser("train", help="train every configured fusion kind over all trials"))
    common(sub.add_parser("bounds", help="theoretical bounds for a snapshot"), snapshot_arg=True)
    est = common(sub.add_parser("estimate", help="empirical Lipschitz estimates for a snapshot"), snapshot_arg=True)
    est.add_argument("--self-test", action="store_true",
                     help="run the estimator on f(x)=|x|^2/2 (expected value 1.0) instead")
    common(sub.add_parser("ablate", help="attention models over the lambda grid"))
    common(sub.add_parser("detect", help="fault detection on a snapshot's latents"), snapshot_arg=True)
    sub.add_parser("defaults", help="print the default config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "defaults":
        sys.stdout.write(cfgmod.dump(cfgmod.DEFAULTS))
        return EXIT_OK
    try:
        cfg = cfgmod.load(args.config, args.seed_override)
        dataset_spec(cfg)  # surface dataset spec errors as config errors
        out = args.out
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, args.strict)
        if args.command == "ablate":
            return cmd_ablate(cfg, out, args.strict)
        if args.command == "estimate":
            return cmd_estimate(args.snapshot, cfg, out, args.self_test)
        if args.snapshot is None:
            raise cfgmod.ConfigError(f"{args.command} needs a snapshot path")
        if args.command == "bounds":
            return cmd_bounds(args.snapshot, cfg, out)
        return cmd_detect(args.snapshot, cfg, out)
    except InvalidSpecError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MmlipError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
