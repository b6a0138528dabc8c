"""Seeded synthetic multimodal data with a shared latent process and fault injection."""

from __future__ import annotations

import enum
import io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import InvalidSpecError

__all__ = [
    "SyntheticSpec",
    "MultimodalDataset",
    "FaultKind",
    "FaultSpec",
    "generate",
    "inject_faults",
    "window_starts",
    "save_dataset",
    "load_dataset",
]

WALK_PERSISTENCE = 0.95
TEST_EVERY = 5  # every fifth position of the shuffled order goes to the test split


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 100
    shared_latent_dim: int = 4
    modality_dims: tuple = (64, 4)
    noise_std: float = 0.05
    window_length: int = 20
    window_step: int = 1
    seed: int = 0
    # index of the windowed (temporal) modality, or None for no windowing
    temporal_modality: Optional[int] = -1

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        if not self.modality_dims or min(self.modality_dims) < 1:
            raise InvalidSpecError(f"modality dims must be >= 1, got {self.modality_dims}")
        if self.shared_latent_dim < 1:
            raise InvalidSpecError("shared_latent_dim must be >= 1")
        if self.window_length < 1 or self.window_step < 1:
            raise InvalidSpecError("window_length and window_step must be >= 1")
        if self.n_samples <= self.window_length:
            raise InvalidSpecError(
                f"n_samples ({self.n_samples}) must exceed window_length ({self.window_length})")
        if not (self.noise_std >= 0 and np.isfinite(self.noise_std)):
            raise InvalidSpecError("noise_std must be finite and >= 0")
        t = self.temporal_modality
        if t is not None and not -len(self.modality_dims) <= t < len(self.modality_dims):
            raise InvalidSpecError(f"temporal_modality {t} out of range")

    @property
    def temporal_index(self) -> Optional[int]:
        t = self.temporal_modality
        return None if t is None else t % len(self.modality_dims)

    def feature_dims(self) -> list[int]:
        """Widths of the stored modality vectors (the temporal one is flattened windows)."""
        dims = list(self.modality_dims)
        if self.temporal_index is not None:
            dims[self.temporal_index] *= self.window_length
        return dims

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "shared_latent_dim": self.shared_latent_dim,
            "modality_dims": list(self.modality_dims),
            "noise_std": self.noise_std,
            "window_length": self.window_length,
            "window_step": self.window_step,
            "seed": self.seed,
            "temporal_modality": self.temporal_modality,
        }


@dataclass(frozen=True)
class MultimodalDataset:
    """Normalized samples per modality plus everything needed to undo the normalization."""

    modalities: tuple  # (m, p_i) arrays, z-scored
    means: tuple
    stds: tuple
    faulty: np.ndarray  # bool per sample
    is_test: np.ndarray  # bool per sample
    spec: Optional[SyntheticSpec] = None

    def __post_init__(self):
        mods = tuple(np.asarray(x, dtype=np.float64) for x in self.modalities)
        if not mods:
            raise InvalidSpecError("dataset needs at least one modality")
        m = mods[0].shape[0]
        for x in mods:
            if x.ndim != 2 or x.shape[0] != m:
                raise InvalidSpecError("modalities must be 2-d with equal sample counts")
        faulty = np.asarray(self.faulty, dtype=bool)
        is_test = np.asarray(self.is_test, dtype=bool)
        if faulty.shape != (m,) or is_test.shape != (m,):
            raise InvalidSpecError("labels and split flags need one entry per sample")
        for x in mods:
            x.flags.writeable = False
        faulty.flags.writeable = False
        is_test.flags.writeable = False
        object.__setattr__(self, "modalities", mods)
        object.__setattr__(self, "means", tuple(np.asarray(a, dtype=np.float64) for a in self.means))
        object.__setattr__(self, "stds", tuple(np.asarray(a, dtype=np.float64) for a in self.stds))
        object.__setattr__(self, "faulty", faulty)
        object.__setattr__(self, "is_test", is_test)

    @property
    def n_samples(self) -> int:
        return self.modalities[0].shape[0]

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def dims(self) -> list[int]:
        return [x.shape[1] for x in self.modalities]

    def subset(self, mask) -> "MultimodalDataset":
        mask = np.asarray(mask)
        return replace(self, modalities=tuple(x[mask] for x in self.modalities),
                       faulty=self.faulty[mask], is_test=self.is_test[mask])

    def train(self) -> "MultimodalDataset":
        return self.subset(~self.is_test)

    def test(self) -> "MultimodalDataset":
        return self.subset(self.is_test)

    def denormalized(self, i: int) -> np.ndarray:
        return self.modalities[i] * self.stds[i] + self.means[i]

    def feature_names(self, i: int) -> list[str]:
        return [f"m{i}_f{j}" for j in range(self.modalities[i].shape[1])]


def window_starts(n: int, length: int, step: int) -> range:
    """Timesteps t whose history window [t - length, t) is complete."""
    return range(length, n, step)


def _latent_walk(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    # mean-reverting walk: smooth but stationary, so long series stay bounded
    z = np.empty((n, k))
    z[0] = rng.standard_normal(k)
    kick = np.sqrt(1.0 - WALK_PERSISTENCE ** 2)
    for t in range(1, n):
        z[t] = WALK_PERSISTENCE * z[t - 1] + kick * rng.standard_normal(k)
    return z


def generate(spec: SyntheticSpec) -> MultimodalDataset:
    rng = np.random.default_rng(spec.seed)
    n, k = spec.n_samples, spec.shared_latent_dim
    z = _latent_walk(rng, n, k)
    obs = []
    for p in spec.modality_dims:
        a = rng.standard_normal((p, k)) / np.sqrt(k)
        obs.append(z @ a.T + spec.noise_std * rng.standard_normal((n, p)))

    ti = spec.temporal_index
    if ti is None:
        raw = obs
    else:
        starts = np.array(window_starts(n, spec.window_length, spec.window_step))
        raw = []
        for i, x in enumerate(obs):
            if i == ti:
                raw.append(np.stack([x[t - spec.window_length:t].ravel() for t in starts]))
            else:
                raw.append(x[starts])

    m = raw[0].shape[0]
    order = rng.permutation(m)
    is_test = np.zeros(m, dtype=bool)
    is_test[order[np.arange(m) % TEST_EVERY == TEST_EVERY - 1]] = True

    mods, means, stds = [], [], []
    for x in raw:
        mu = x[~is_test].mean(axis=0)
        sd = x[~is_test].std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        mods.append((x - mu) / sd)
        means.append(mu)
        stds.append(sd)
    return MultimodalDataset(tuple(mods), tuple(means), tuple(stds),
                             np.zeros(m, dtype=bool), is_test, spec)


class FaultKind(str, enum.Enum):
    ADDITIVE_NOISE = "additive_noise"
    CHANNEL_DROPOUT = "channel_dropout"
    BIAS = "bias"


@dataclass(frozen=True)
class FaultSpec:
    """Perturbation applied to a random ``fraction`` of samples.

    ``magnitude`` is the noise standard deviation for additive noise, the
    per-channel drop probability for dropout (dropped channels read 0, the
    normalized mean) and the per-feature offset for bias.
    """

    fraction: float = 0.2
    kind: FaultKind = FaultKind.BIAS
    magnitude: float = 5.0
    affected_modalities: tuple = (0,)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", FaultKind(self.kind))
        object.__setattr__(self, "affected_modalities", tuple(int(i) for i in self.affected_modalities))
        if not 0.0 <= self.fraction <= 1.0:
            raise InvalidSpecError(f"fraction must be in [0, 1], got {self.fraction}")
        if not np.isfinite(self.magnitude):
            raise InvalidSpecError("magnitude must be finite")
        if self.kind is FaultKind.CHANNEL_DROPOUT and not 0.0 <= self.magnitude <= 1.0:
            raise InvalidSpecError("dropout magnitude is a probability in [0, 1]")

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "kind": self.kind.value, "magnitude": self.magnitude,
                "affected_modalities": list(self.affected_modalities), "seed": self.seed}


def inject_faults(ds: MultimodalDataset, fault: FaultSpec, candidates=None) -> MultimodalDataset:
    """Copy of ``ds`` with faults applied to ``round(fraction * m)`` samples.

    ``candidates`` optionally restricts which samples may be hit (boolean mask).
    """
    if not fault.affected_modalities:
        raise InvalidSpecError("affected_modalities is empty")
    for i in fault.affected_modalities:
        if not 0 <= i < ds.n_modalities:
            raise InvalidSpecError(f"modality {i} does not exist")
    pool = np.arange(ds.n_samples) if candidates is None else np.flatnonzero(candidates)
    count = int(round(fault.fraction * pool.size))
    rng = np.random.default_rng(fault.seed)
    hit = np.sort(rng.choice(pool, size=count, replace=False)) if count else np.array([], dtype=int)

    mods = [x.copy() for x in ds.modalities]
    for i in fault.affected_modalities:
        block = mods[i][hit]
        if fault.kind is FaultKind.ADDITIVE_NOISE:
            block = block + fault.magnitude * rng.standard_normal(block.shape)
        elif fault.kind is FaultKind.CHANNEL_DROPOUT:
            block = np.where(rng.random(block.shape) < fault.magnitude, 0.0, block)
        else:
            block = block + fault.magnitude
        mods[i][hit] = block
    faulty = ds.faulty.copy()
    faulty[hit] = True
    return replace(ds, modalities=tuple(mods), faulty=faulty)


# -- CSV directory export -------------------------------------------------------

MANIFEST = "manifest.yaml"


def _csv_text(names, x) -> str:
    buf = io.StringIO()
    np.savetxt(buf, x, delimiter=",", fmt="%.17g", header=",".join(names), comments="")
    return buf.getvalue()


def _write_atomic(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_dataset(ds: MultimodalDataset, out_dir) -> Path:
    """One CSV per modality (normalized values) plus a YAML manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, x in enumerate(ds.modalities):
        name = f"modality_{i}.csv"
        _write_atomic(out / name, _csv_text(ds.feature_names(i), x))
        files.append(name)
    manifest = {
        "format": "mmlip-dataset/1",
        "spec": None if ds.spec is None else ds.spec.to_dict(),
        "n_samples": ds.n_samples,
        "files": files,
        "means": [[float(v) for v in a] for a in ds.means],
        "stds": [[float(v) for v in a] for a in ds.stds],
        "faulty": [int(v) for v in ds.faulty],
        "is_test": [int(v) for v in ds.is_test],
    }
    _write_atomic(out / MANIFEST, yaml.safe_dump(manifest, sort_keys=False, default_flow_style=None))
    return out


def load_dataset(in_dir) -> MultimodalDataset:
    src = Path(in_dir)
    try:
        manifest = yaml.safe_load((src / MANIFEST).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise InvalidSpecError(f"cannot read dataset manifest in {src}: {exc}") from exc
    mods = []
    for name in manifest["files"]:
        x = np.loadtxt(src / name, delimiter=",", skiprows=1, ndmin=2)
        mods.append(x)
    spec = None
    if manifest.get("spec") is not None:
        spec = SyntheticSpec(**manifest["spec"])
    return MultimodalDataset(tuple(mods), tuple(np.array(a) for a in manifest["means"]),
                             tuple(np.array(a) for a in manifest["stds"]),
                             np.array(manifest["faulty"], dtype=bool),
                             np.array(manifest["is_test"], dtype=bool), spec)
