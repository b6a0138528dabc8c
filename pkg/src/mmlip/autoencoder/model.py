"""Multimodal autoencoder: per-modality MLP encoders and decoders around a fusion step."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..errors import InvalidInputError, ShapeError
from ..fusion import (
    AttentionParams,
    FusedOutput,
    FusionKind,
    FusionMethod,
)
from . import tape
from .mlp import Mlp, MlpSpec

UNIT_NORM_EPS = 1e-12


@dataclass(frozen=True)
class ModelFusion:
    """Fusion settings of a model. Attention weights live with the model parameters.

    Each modality's attention projection is a chain of ``attention_layers``
    square matrices with ReLU in between.
    """

    method: FusionMethod = FusionMethod.SUM
    unit_norm_inputs: bool = True
    spectral_normalize: bool = True
    scale_by_sqrt_d: bool = True
    lambda_reg: float = 1e-5
    attention_layers: int = 2

    def __post_init__(self):
        object.__setattr__(self, "method", FusionMethod(self.method))
        if self.lambda_reg < 0 or not np.isfinite(self.lambda_reg):
            raise InvalidInputError("lambda_reg must be finite and non-negative")
        if self.attention_layers < 1:
            raise InvalidInputError("attention_layers must be at least 1")

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "unit_norm_inputs": self.unit_norm_inputs,
            "spectral_normalize": self.spectral_normalize,
            "scale_by_sqrt_d": self.scale_by_sqrt_d,
            "lambda_reg": self.lambda_reg,
            "attention_layers": self.attention_layers,
        }


@dataclass(frozen=True)
class ModelSpec:
    encoders: tuple  # MlpSpec per modality
    fusion: ModelFusion = field(default_factory=ModelFusion)

    def __post_init__(self):
        encs = tuple(e if isinstance(e, MlpSpec) else MlpSpec(**e) for e in self.encoders)
        if not encs:
            raise InvalidInputError("need at least one modality")
        object.__setattr__(self, "encoders", encs)
        latent = [e.layer_widths[-1] for e in encs]
        if self.fusion.method in (FusionMethod.SUM, FusionMethod.ATTENTION) and len(set(latent)) != 1:
            raise ShapeError(f"{self.fusion.method.value} fusion needs equal latent dims, got {latent}")
        if self.fusion.method is FusionMethod.ATTENTION and len(encs) < 2:
            raise InvalidInputError("attention fusion needs at least two modalities")

    @property
    def n(self) -> int:
        return len(self.encoders)

    @property
    def latent_dims(self) -> list[int]:
        return [e.layer_widths[-1] for e in self.encoders]

    @property
    def fused_dim(self) -> int:
        if self.fusion.method is FusionMethod.SUM:
            return self.latent_dims[0]
        return sum(self.latent_dims)

    def decoder_specs(self) -> list[MlpSpec]:
        out = []
        for e in self.encoders:
            m = e.mirrored()
            out.append(MlpSpec((self.fused_dim,) + m.layer_widths[1:], m.activation))
        return out

    def with_method(self, method, **kw) -> "ModelSpec":
        return ModelSpec(self.encoders, replace(self.fusion, method=FusionMethod(method), **kw))

    def to_dict(self) -> dict:
        return {"encoders": [e.to_dict() for e in self.encoders], "fusion": self.fusion.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(MlpSpec(**e) for e in d["encoders"]), ModelFusion(**d["fusion"]))


def default_spec(modality_dims: Sequence[int], method="sum", hidden: int = 32, latent: int = 16, **fusion_kw) -> ModelSpec:
    encs = tuple(MlpSpec((int(p), hidden, latent), ("relu",)) for p in modality_dims)
    return ModelSpec(encs, ModelFusion(method=FusionMethod(method), **fusion_kw))


def _as_batch(inputs, spec: "ModelSpec") -> list[np.ndarray]:
    n = spec.n
    if len(inputs) != n:
        raise ShapeError(f"expected {n} modality inputs, got {len(inputs)}")
    xs = [np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in inputs]
    for i, (x, es) in enumerate(zip(xs, spec.encoders)):
        if x.ndim != 2 or x.shape[1] != es.layer_widths[0]:
            raise ShapeError(f"modality {i} has width {x.shape[-1]}, encoder expects {es.layer_widths[0]}")
    b = xs[0].shape[0]
    if any(x.shape[0] != b for x in xs):
        raise ShapeError("modalities have different sample counts")
    return xs


class MultimodalAutoencoder:
    """Parameters are stored in one flat dict so optimizers and snapshots can treat them uniformly.

    Names: ``enc{i}.W{l}``, ``enc{i}.b{l}``, ``dec{i}.W{l}``, ``dec{i}.b{l}``
    and ``att{i}.W{l}`` for the attention chains.
    """

    def __init__(self, spec: ModelSpec, params: dict):
        self.spec = spec
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        expected = set(self.param_names())
        if set(self.params) != expected:
            missing = sorted(expected - set(self.params))
            extra = sorted(set(self.params) - expected)
            raise ShapeError(f"parameter mismatch; missing {missing}, unexpected {extra}")
        self.encoders  # validates shapes
        self.decoders

    # -- construction -----------------------------------------------------

    @classmethod
    def init(cls, spec: ModelSpec, seed: int) -> "MultimodalAutoencoder":
        """Uniform(+-1/sqrt(fan_in)) weights and biases from a seeded generator."""
        rng = np.random.default_rng(seed)
        params = {}
        for i, es in enumerate(spec.encoders):
            _store(params, f"enc{i}", Mlp.init(es, rng))
        for i, ds in enumerate(spec.decoder_specs()):
            _store(params, f"dec{i}", Mlp.init(ds, rng))
        if spec.fusion.method is FusionMethod.ATTENTION:
            d = spec.latent_dims[0]
            bound = 1.0 / np.sqrt(d)
            for i in range(spec.n):
                for l in range(spec.fusion.attention_layers):
                    params[f"att{i}.W{l}"] = rng.uniform(-bound, bound, size=(d, d))
        return cls(spec, params)

    def param_names(self) -> list[str]:
        names = []
        for prefix, specs in (("enc", self.spec.encoders), ("dec", self.spec.decoder_specs())):
            for i, s in enumerate(specs):
                for l in range(s.n_layers):
                    names += [f"{prefix}{i}.W{l}", f"{prefix}{i}.b{l}"]
        if self.spec.fusion.method is FusionMethod.ATTENTION:
            for i in range(self.spec.n):
                names += [f"att{i}.W{l}" for l in range(self.spec.fusion.attention_layers)]
        return names

    def with_params(self, params: dict) -> "MultimodalAutoencoder":
        return MultimodalAutoencoder(self.spec, params)

    # -- views --------------------------------------------------------------

    def _mlp(self, prefix: str, spec: MlpSpec) -> Mlp:
        ws = [self.params[f"{prefix}.W{l}"] for l in range(spec.n_layers)]
        bs = [self.params[f"{prefix}.b{l}"] for l in range(spec.n_layers)]
        return Mlp(spec, ws, bs)

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def encoders(self) -> list[Mlp]:
        return [self._mlp(f"enc{i}", s) for i, s in enumerate(self.spec.encoders)]

    @property
    def decoders(self) -> list[Mlp]:
        return [self._mlp(f"dec{i}", s) for i, s in enumerate(self.spec.decoder_specs())]

    def attention_chains(self) -> list[list[np.ndarray]]:
        if self.spec.fusion.method is not FusionMethod.ATTENTION:
            return []
        return [[self.params[f"att{i}.W{l}"] for l in range(self.spec.fusion.attention_layers)]
                for i in range(self.n)]

    def fusion_kind(self) -> FusionKind:
        """Fusion as a :class:`FusionKind`; attention chains are collapsed only when single-layer."""
        f = self.spec.fusion
        if f.method is not FusionMethod.ATTENTION:
            return FusionKind(f.method)
        chains = self.attention_chains()
        if f.attention_layers != 1:
            raise InvalidInputError("multi-layer attention chains have no single-matrix FusionKind")
        return FusionKind.attention(AttentionParams(
            tuple(c[0] for c in chains), f.unit_norm_inputs, f.spectral_normalize, f.scale_by_sqrt_d, f.lambda_reg))

    def total_param_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(v * v) for v in self.params.values())))

    # -- computation ----------------------------------------------------------

    def _graph(self, xs: list[np.ndarray]):
        pv = {k: tape.Var(v, name=k) for k, v in self.params.items()}
        f = self.spec.fusion
        encs = self.encoders
        latents = []
        for i, e in enumerate(encs):
            ps = [pv[f"enc{i}.{t}{l}"] for l in range(e.spec.n_layers) for t in "Wb"]
            latents.append(e.tape_forward(ps, tape.Var(xs[i])))

        u, alpha = self._fusion_graph(pv, latents)

        recons = []
        for i, dec in enumerate(self.decoders):
            ps = [pv[f"dec{i}.{t}{l}"] for l in range(dec.spec.n_layers) for t in "Wb"]
            recons.append(dec.tape_forward(ps, u))

        b = xs[0].shape[0]
        per_mod = []
        for x, r in zip(xs, recons):
            diff = tape.sub(x, r)
            per_mod.append(tape.total(diff * diff) * (1.0 / b))
        loss = per_mod[0]
        for t in per_mod[1:]:
            loss = loss + t
        if f.method is FusionMethod.ATTENTION and f.lambda_reg > 0:
            reg = None
            for k, v in pv.items():
                if k.startswith("att"):
                    term = tape.total(v * v)
                    reg = term if reg is None else reg + term
            loss = loss + reg * f.lambda_reg
        return pv, latents, u, alpha, recons, per_mod, loss

    def _fusion_graph(self, pv, latents):
        method = self.spec.fusion.method
        if method is FusionMethod.SUM:
            u = latents[0]
            for z in latents[1:]:
                u = u + z
            return u, None
        if method is FusionMethod.CONCAT:
            return tape.concat(latents, axis=1), None
        return self._attention_graph(pv, latents)

    def fuse_latents(self, latents) -> np.ndarray:
        """Fused vectors for given encoder outputs, one ``(batch, d_i)`` block per modality."""
        pv = {k: tape.Var(v) for k, v in self.params.items() if k.startswith("att")}
        zs = [tape.Var(np.atleast_2d(np.asarray(z, dtype=np.float64))) for z in latents]
        return self._fusion_graph(pv, zs)[0].value

    def _attention_graph(self, pv, latents):
        f = self.spec.fusion
        n = self.n
        d = self.spec.latent_dims[0]
        vs = []
        for z in latents:
            if f.unit_norm_inputs:
                norm = tape.sqrt(tape.total(z * z, axis=1, keepdims=True))
                z = z / (norm + UNIT_NORM_EPS)
            vs.append(z)
        proj = []
        for i, v in enumerate(vs):
            h = v
            for l in range(f.attention_layers):
                w = pv[f"att{i}.W{l}"]
                if f.spectral_normalize:
                    w = tape.spectral_normalize(w)
                h = tape.linear(h, w)
                if l < f.attention_layers - 1:
                    h = tape.relu(h)
            proj.append(h)
        s = proj[0]
        for p in proj[1:]:
            s = s + p
        scale = 1.0 / (n - 1)
        if f.scale_by_sqrt_d:
            scale /= np.sqrt(d)
        alphas, blocks = [], []
        for i in range(n):
            a = tape.total(proj[i] * (s - proj[i]), axis=1, keepdims=True) * scale
            alphas.append(a)
            blocks.append(a * vs[i])
        return tape.concat(blocks, axis=1), tape.concat(alphas, axis=1)

    def forward(self, inputs):
        """Fused output and per-modality reconstructions.

        ``inputs`` holds one array per modality, either a single vector or a
        ``(batch, dim)`` block; outputs keep the batch axis in the latter case.
        """
        single = np.asarray(inputs[0]).ndim == 1
        xs = _as_batch(inputs, self.spec)
        _, _, u, alpha, recons, _, _ = self._graph(xs)
        uv = u.value
        coeffs = alpha.value if alpha is not None else np.zeros((uv.shape[0], 0))
        rs = [r.value for r in recons]
        if single:
            return FusedOutput(uv[0], coeffs[0]), [r[0] for r in rs]
        return FusedOutput(uv, coeffs), rs

    def fused(self, inputs) -> np.ndarray:
        return self.forward(_as_batch(inputs, self.spec))[0].u

    def encode(self, inputs) -> list[np.ndarray]:
        xs = _as_batch(inputs, self.spec)
        return [e.forward(x) for e, x in zip(self.encoders, xs)]

    def loss(self, inputs) -> float:
        """Batch mean of the summed squared reconstruction errors, plus the attention penalty."""
        return float(self._graph(_as_batch(inputs, self.spec))[-1].value)

    def modality_losses(self, inputs) -> np.ndarray:
        per_mod = self._graph(_as_batch(inputs, self.spec))[5]
        return np.array([float(t.value) for t in per_mod])

    def backward(self, inputs) -> tuple[float, dict]:
        """Loss and its exact gradient for every parameter."""
        pv, *_, loss = self._graph(_as_batch(inputs, self.spec))
        g = tape.backward(loss)
        grads = {k: g.get(id(v), np.zeros_like(v.value)) for k, v in pv.items()}
        return float(loss.value), grads


def _store(params: dict, prefix: str, mlp: Mlp):
    for l, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        params[f"{prefix}.W{l}"] = w
        params[f"{prefix}.b{l}"] = b
