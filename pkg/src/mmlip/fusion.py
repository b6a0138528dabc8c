"""Aggregation of per-modality latents: summation, concatenation and
pairwise-averaged bilinear attention, with their Jacobians.

Modality indices are zero-based throughout.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    InvalidInputError,
    ShapeError,
    UnsupportedConfigurationError,
)
from .linalg import as_matrix, as_vector, top_singular

__all__ = [
    "FusionMethod",
    "AttentionParams",
    "FusionKind",
    "FusedOutput",
    "SN_TOL",
    "spectrally_normalize",
    "effective_weights",
    "fuse",
    "attention_forward_batch",
    "attention_jacobian",
    "attention_full_jacobian_batch",
    "attention_reg_term",
    "attention_reg_gradient",
    "fusion_jacobian",
]

# spectral normalization runs power iteration to near machine precision so
# that normalized weights are reproducible and differentiable to FD accuracy
SN_TOL = 1e-14
SN_MAX_ITER = 20000


class FusionMethod(str, enum.Enum):
    SUM = "sum"
    CONCAT = "concat"
    ATTENTION = "attention"


@dataclass(frozen=True)
class AttentionParams:
    weights: tuple
    unit_norm_inputs: bool = False
    spectral_normalize: bool = False
    scale_by_sqrt_d: bool = False
    lambda_reg: float = 0.0

    def __post_init__(self):
        ws = tuple(as_matrix(w, f"weights[{i}]") for i, w in enumerate(self.weights))
        if len(ws) < 2:
            raise InvalidInputError("attention needs at least two modalities")
        d = ws[0].shape[0]
        for i, w in enumerate(ws):
            if w.shape != (d, d):
                raise ShapeError(f"weights[{i}] has shape {w.shape}, expected {(d, d)}")
        if not np.isfinite(self.lambda_reg) or self.lambda_reg < 0:
            raise InvalidInputError("lambda_reg must be a finite non-negative number")
        object.__setattr__(self, "weights", ws)

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.weights[0].shape[0]

    @property
    def raw(self) -> bool:
        """True when no stabilization flag is active (the plain bilinear map)."""
        return not (self.unit_norm_inputs or self.spectral_normalize or self.scale_by_sqrt_d)


@dataclass(frozen=True)
class FusionKind:
    method: FusionMethod
    params: AttentionParams | None = None

    def __post_init__(self):
        object.__setattr__(self, "method", FusionMethod(self.method))
        if self.method is FusionMethod.ATTENTION and self.params is None:
            raise InvalidInputError("attention fusion needs AttentionParams")

    @classmethod
    def sum(cls) -> "FusionKind":
        return cls(FusionMethod.SUM)

    @classmethod
    def concat(cls) -> "FusionKind":
        return cls(FusionMethod.CONCAT)

    @classmethod
    def attention(cls, params: AttentionParams) -> "FusionKind":
        return cls(FusionMethod.ATTENTION, params)


@dataclass(frozen=True)
class FusedOutput:
    u: np.ndarray
    coefficients: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # a_ij for i != j; the diagonal is unused and left at zero
    scores: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def spectrally_normalize(w) -> np.ndarray:
    w = as_matrix(w)
    sigma = top_singular(w, tol=SN_TOL, max_iter=SN_MAX_ITER).sigma
    if sigma == 0.0:
        raise DegenerateInputError("cannot spectrally normalize a zero matrix")
    return w / sigma


def effective_weights(params: AttentionParams) -> tuple:
    if params.spectral_normalize:
        return tuple(spectrally_normalize(w) for w in params.weights)
    return params.weights


def _check_latents(latents: Sequence, n_expected: int | None = None) -> list[np.ndarray]:
    vs = [as_vector(v, f"latents[{i}]") for i, v in enumerate(latents)]
    if not vs:
        raise ShapeError("no latents given")
    if n_expected is not None and len(vs) != n_expected:
        raise ShapeError(f"expected {n_expected} latents, got {len(vs)}")
    return vs


def attention_forward_batch(
    weights: Sequence[np.ndarray],
    V: np.ndarray,
    unit_norm_inputs: bool = False,
    scale_by_sqrt_d: bool = False,
):
    """Batched attention on already-effective weights.

    ``V`` has shape ``(batch, n, d)``. Returns ``(u, alpha, scores, V_used)``
    with ``u`` of shape ``(batch, n*d)``.
    """
    V = np.asarray(V, dtype=np.float64)
    b, n, d = V.shape
    if unit_norm_inputs:
        norms = np.linalg.norm(V, axis=2, keepdims=True)
        if np.any(norms == 0.0):
            raise DegenerateInputError("zero latent vector cannot be normalized to unit norm")
        V = V / norms
    proj = np.stack([V[:, i, :] @ np.asarray(weights[i]).T for i in range(n)], axis=1)
    scores = np.einsum("bid,bjd->bij", proj, proj)
    if scale_by_sqrt_d:
        scores = scores / np.sqrt(d)
    idx = np.arange(n)
    scores[:, idx, idx] = 0.0
    alpha = scores.sum(axis=2) / (n - 1)
    u = (alpha[:, :, None] * V).reshape(b, n * d)
    return u, alpha, scores, V


def fuse(kind: FusionKind, latents: Sequence) -> FusedOutput:
    """Combine per-modality latent vectors according to ``kind``."""
    if kind.method is FusionMethod.SUM:
        vs = _check_latents(latents)
        d = vs[0].shape[0]
        for i, v in enumerate(vs):
            if v.shape[0] != d:
                raise ShapeError(f"sum fusion needs equal latent dims; latents[{i}] has {v.shape[0]}, expected {d}")
        return FusedOutput(np.sum(vs, axis=0))
    if kind.method is FusionMethod.CONCAT:
        vs = _check_latents(latents)
        return FusedOutput(np.concatenate(vs))

    params = kind.params
    vs = _check_latents(latents, params.n)
    for i, v in enumerate(vs):
        if v.shape[0] != params.d:
            raise ShapeError(f"latents[{i}] has dim {v.shape[0]}, attention weights are {params.d}x{params.d}")
    u, alpha, scores, _ = attention_forward_batch(
        effective_weights(params),
        np.stack(vs)[None],
        unit_norm_inputs=params.unit_norm_inputs,
        scale_by_sqrt_d=params.scale_by_sqrt_d,
    )
    return FusedOutput(u[0], alpha[0], scores[0])


def _require_raw(params: AttentionParams):
    if not params.raw:
        raise UnsupportedConfigurationError(
            "analytic attention Jacobian covers only the raw map; disable "
            "unit_norm_inputs, spectral_normalize and scale_by_sqrt_d"
        )


def attention_jacobian(params: AttentionParams, latents: Sequence, k: int) -> np.ndarray:
    """Jacobian of the fused attention output with respect to latent ``k``.

    Returns an ``(n*d, d)`` matrix whose ``i``-th ``d x d`` block is

    * ``alpha_i I + v_i g_ii^T`` for ``i == k``, with
      ``g_ii = 1/(n-1) * sum_{j != i} W_i^T W_j v_j``
    * ``v_i g_ik^T`` for ``i != k``, with ``g_ik = 1/(n-1) * W_k^T W_i v_i``

    where ``g_ik`` is the gradient of ``alpha_i`` with respect to ``v_k``.
    Rows index output coordinates and columns index coordinates of ``v_k``.
    """
    _require_raw(params)
    n, d = params.n, params.d
    if not 0 <= k < n:
        raise InvalidInputError(f"modality index {k} out of range for {n} modalities")
    vs = _check_latents(latents, n)
    V = np.stack(vs)
    return attention_full_jacobian_batch(params.weights, V[None])[0][:, k * d:(k + 1) * d]


def attention_full_jacobian_batch(weights: Sequence[np.ndarray], V: np.ndarray) -> np.ndarray:
    """Full ``(batch, n*d, n*d)`` Jacobian of the raw attention map.

    Column block ``k`` equals :func:`attention_jacobian` for modality ``k``.
    """
    V = np.asarray(V, dtype=np.float64)
    b, n, d = V.shape
    W = np.stack([np.asarray(w) for w in weights])  # (n, d, d)
    proj = np.einsum("ide,bie->bid", W, V)  # W_i v_i
    scores = np.einsum("bid,bjd->bij", proj, proj)
    idx = np.arange(n)
    scores[:, idx, idx] = 0.0
    alpha = scores.sum(axis=2) / (n - 1)
    # back[b, k, i] = W_k^T (W_i v_i)
    back = np.einsum("kde,bid->bkie", W, proj)
    total = proj.sum(axis=1)  # sum_j W_j v_j
    J = np.zeros((b, n, d, n, d))
    for i in range(n):
        for k in range(n):
            if i == k:
                g = (np.einsum("de,bd->be", W[i], total - proj[:, i])) / (n - 1)
                J[:, i, :, i, :] = alpha[:, i, None, None] * np.eye(d) + V[:, i, :, None] * g[:, None, :]
            else:
                g = back[:, k, i] / (n - 1)
                J[:, i, :, k, :] = V[:, i, :, None] * g[:, None, :]
    return J.reshape(b, n * d, n * d)


def attention_reg_term(params: AttentionParams) -> float:
    return float(params.lambda_reg * sum(np.sum(w * w) for w in params.weights))


def attention_reg_gradient(params: AttentionParams, i: int) -> np.ndarray:
    if not 0 <= i < params.n:
        raise InvalidInputError(f"modality index {i} out of range for {params.n} modalities")
    return 2.0 * params.lambda_reg * np.array(params.weights[i])


def fusion_jacobian(kind: FusionKind, latents: Sequence, k: int) -> np.ndarray:
    """Derivative of the fused vector with respect to latent ``k``."""
    if kind.method is FusionMethod.ATTENTION:
        return attention_jacobian(kind.params, latents, k)
    fused = fuse(kind, latents)  # validates shapes
    vs = [np.asarray(v) for v in latents]
    if not 0 <= k < len(vs):
        raise InvalidInputError(f"modality index {k} out of range for {len(vs)} modalities")
    dk = vs[k].shape[0]
    if kind.method is FusionMethod.SUM:
        return np.eye(dk)
    J = np.zeros((fused.u.shape[0], dk))
    offset = sum(v.shape[0] for v in vs[:k])
    J[offset:offset + dk] = np.eye(dk)
    return J
