"""Adam optimization and the training loop with per-epoch Lipschitz tracking."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..errors import InvalidInputError, TrainingDivergenceError
from ..estimator import estimate_model_lipschitz
from ..fusion import FusionMethod
from .model import ModelSpec, MultimodalAutoencoder

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, learning_rate: float) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for {k}")
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = BETA1 * state.m[k] + (1 - BETA1) * g
        v = BETA2 * state.v[k] + (1 - BETA2) * g * g
        m_hat = m / (1 - BETA1 ** t)
        v_hat = v / (1 - BETA2 ** t)
        new_p[k] = p - learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    lambda_reg: float = 1e-5
    seed: int = 0
    trials: int = 1
    lipschitz_every: int = 10
    lipschitz_pairs: int = 512

    def __post_init__(self):
        # epochs may be 0: that returns the untouched initialization
        if self.epochs < 0:
            raise InvalidInputError("epochs must be >= 0")
        for name in ("batch_size", "trials", "lipschitz_every", "lipschitz_pairs"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be > 0")
        if not self.lambda_reg >= 0:
            raise InvalidInputError("lambda_reg must be >= 0")

    def trial_seed(self, trial: int) -> int:
        return int(np.random.SeedSequence([self.seed, trial]).generate_state(1)[0])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: list
    test_loss: list
    combined_loss: float
    lipschitz: Optional[dict] = None  # submodel name -> gradient-Lipschitz estimate
    model_lipschitz: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "test_loss": self.test_loss,
            "combined_loss": self.combined_loss,
            "lipschitz": self.lipschitz,
            "model_lipschitz": self.model_lipschitz,
        }


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    diverged: bool = False
    message: str = ""
    model: Optional[MultimodalAutoencoder] = None
    snapshot: Optional[str] = None
    fusion: str = ""
    trial: int = 0
    initial_loss: Optional[float] = None

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            d = {"fusion": self.fusion, "trial": self.trial, **r.to_dict()}
            lines.append(json.dumps(d, sort_keys=False, allow_nan=False))
        return "".join(line + "\n" for line in lines)

    def final_model_lipschitz(self) -> Optional[float]:
        for r in reversed(self.records):
            if r.model_lipschitz is not None:
                return r.model_lipschitz
        return None


def submodel_lipschitz(model: MultimodalAutoencoder, train_inputs: list, n_pairs: int,
                       seed: int) -> dict:
    """Gradient-Lipschitz estimate of every encoder and decoder over the training data.

    Encoders are probed on their modality's samples, decoders on the fused
    latents those samples produce.
    """
    out = {}
    seeds = np.random.SeedSequence(seed).generate_state(2 * model.n)
    for i, enc in enumerate(model.encoders):
        out[f"encoder{i}"] = estimate_model_lipschitz(enc, train_inputs[i], n_pairs, seed=int(seeds[i])).value
    u = model.fused(train_inputs)
    for i, dec in enumerate(model.decoders):
        out[f"decoder{i}"] = estimate_model_lipschitz(dec, u, n_pairs, seed=int(seeds[model.n + i])).value
    return out


def _resolve_spec(model_spec: ModelSpec, fusion, config: TrainConfig) -> ModelSpec:
    method = model_spec.fusion.method if fusion is None else FusionMethod(fusion)
    return ModelSpec(model_spec.encoders,
                     replace(model_spec.fusion, method=method, lambda_reg=config.lambda_reg))


def train(model_spec: ModelSpec, fusion, dataset, config: TrainConfig, trial: int = 0) -> TrainLog:
    """Train one trial. ``fusion`` overrides the spec's fusion method when given.

    Deterministic given ``config.seed`` and ``trial``. A non-finite loss or
    gradient stops training and returns the partial log with ``diverged`` set.
    """
    spec = _resolve_spec(model_spec, fusion, config)
    tr, te = dataset.train(), dataset.test()
    if tr.n_samples == 0:
        raise InvalidInputError("training split is empty")
    x_tr = list(tr.modalities)
    x_te = list(te.modalities)
    seeds = np.random.SeedSequence(config.trial_seed(trial)).generate_state(3)
    model = MultimodalAutoencoder.init(spec, int(seeds[0]))
    order_rng = np.random.default_rng(int(seeds[1]))
    lip_seed = int(seeds[2])
    log = TrainLog(model=model, fusion=spec.fusion.method.value, trial=trial,
                   initial_loss=model.loss(x_tr))
    state = AdamState.zeros(model.params)
    m = tr.n_samples

    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(m)
        try:
            for start in range(0, m, config.batch_size):
                idx = order[start:start + config.batch_size]
                loss, grads = model.backward([x[idx] for x in x_tr])
                if not np.isfinite(loss):
                    raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}")
                params, state = adam_step(model.params, grads, state, config.learning_rate)
                model = model.with_params(params)
            train_losses = model.modality_losses(x_tr)
            test_losses = model.modality_losses(x_te) if te.n_samples else np.full(model.n, np.nan)
            combined = model.loss(x_tr)
            if not (np.all(np.isfinite(train_losses)) and np.isfinite(combined)):
                raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}")
        except (TrainingDivergenceError, FloatingPointError) as exc:
            log.diverged = True
            log.message = str(exc)
            break
        rec = EpochRecord(epoch, [float(v) for v in train_losses],
                          [None if not np.isfinite(v) else float(v) for v in test_losses], float(combined))
        if epoch == 1 or epoch % config.lipschitz_every == 0 or epoch == config.epochs:
            lips = submodel_lipschitz(model, x_tr, config.lipschitz_pairs, lip_seed + epoch)
            rec.lipschitz = lips
            rec.model_lipschitz = max(lips.values())
        log.records.append(rec)
        log.model = model
    return log


def train_trials(model_spec: ModelSpec, fusion, dataset, config: TrainConfig) -> list[TrainLog]:
    return [train(model_spec, fusion, dataset, config, trial=t) for t in range(config.trials)]


def summarize(logs: list[TrainLog]) -> list[dict]:
    """Per-epoch mean, std, min and max across trials of losses and the model Lipschitz estimate."""
    if not logs:
        return []
    n_epochs = max(len(lg.records) for lg in logs)
    rows = []
    for e in range(n_epochs):
        recs = [lg.records[e] for lg in logs if e < len(lg.records)]
        row = {"epoch": recs[0].epoch, "trials": len(recs)}
        series = {"combined_loss": [r.combined_loss for r in recs]}
        for i in range(len(recs[0].train_loss)):
            series[f"train_loss_{i}"] = [r.train_loss[i] for r in recs]
            series[f"test_loss_{i}"] = [r.test_loss[i] for r in recs if r.test_loss[i] is not None]
        series["model_lipschitz"] = [r.model_lipschitz for r in recs if r.model_lipschitz is not None]
        for name, vals in series.items():
            a = np.array(vals, dtype=np.float64)
            if a.size == 0:
                row.update({f"{name}_{s}": None for s in ("mean", "std", "min", "max")})
            else:
                row.update({f"{name}_mean": float(a.mean()), f"{name}_std": float(a.std()),
                            f"{name}_min": float(a.min()), f"{name}_max": float(a.max())})
        rows.append(row)
    return rows
