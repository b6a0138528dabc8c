"""Closed-form Lipschitz bounds for multimodal autoencoders and attention fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .linalg import spectral_norm

__all__ = [
    "DecoderBoundInputs",
    "EncoderBoundInputs",
    "decoder_grad_bound",
    "encoder_grad_bound",
    "aggregation_bounds",
    "attention_func_bound",
    "attention_grad_bound",
    "default_attention_grad_constant",
    "mlp_func_lipschitz",
    "max_norm",
]


def _nonneg(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0:
        raise InvalidInputError(f"{name} must be finite and non-negative, got {value}")
    return value


@dataclass(frozen=True)
class DecoderBoundInputs:
    b_grad: float
    l_dec_func: float
    l_dec_grad: float
    c_input: float
    l_agg: float
    l_enc_func: float

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _nonneg(f.name, getattr(self, f.name)))


@dataclass(frozen=True)
class EncoderBoundInputs:
    decoders: tuple  # (l_dec_func, l_dec_grad) per decoder
    b_agg: float
    l_agg_func: float
    l_agg_grad_k: float
    c_input: float

    def __post_init__(self):
        decs = tuple(
            (_nonneg(f"decoders[{i}].l_dec_func", lf), _nonneg(f"decoders[{i}].l_dec_grad", lg))
            for i, (lf, lg) in enumerate(self.decoders)
        )
        if not decs:
            raise InvalidInputError("at least one decoder is required")
        object.__setattr__(self, "decoders", decs)
        for name in ("b_agg", "l_agg_func", "l_agg_grad_k", "c_input"):
            object.__setattr__(self, name, _nonneg(name, getattr(self, name)))


def decoder_grad_bound(inp: DecoderBoundInputs) -> float:
    """Lipschitz bound of the loss gradient w.r.t. one decoder's parameters."""
    b = inp.b_grad
    return 2.0 * (b + b * inp.l_dec_func + inp.c_input * inp.l_dec_grad) * inp.l_agg * inp.l_enc_func


def encoder_grad_bound(inp: EncoderBoundInputs) -> float:
    """Lipschitz bound of the loss gradient w.r.t. one encoder's parameters.

    Sums a four-term contribution over every decoder, since each decoder
    reads the shared fused latent.
    """
    b, c = inp.b_agg, inp.c_input
    total = 0.0
    for lf, lg in inp.decoders:
        total += lf * b + lf * lf * b * inp.l_agg_func + c * lg * b + c * lf * inp.l_agg_grad_k
    return 2.0 * total


def aggregation_bounds(l_funcs: Sequence[float]) -> tuple[float, float]:
    """``(l_concat, l_sum)`` from per-encoder function constants."""
    ls = np.array([_nonneg(f"l_funcs[{i}]", x) for i, x in enumerate(l_funcs)], dtype=np.float64)
    if ls.size == 0:
        raise InvalidInputError("need at least one encoder constant")
    l_sum = float(ls.sum())
    # scale before squaring so huge constants do not overflow
    top = float(ls.max())
    l_concat = 0.0 if top == 0.0 else top * float(np.sqrt(np.sum((ls / top) ** 2)))
    return min(l_concat, l_sum), l_sum


def attention_func_bound(m_max: float, r_max: float) -> float:
    m = _nonneg("m_max", m_max)
    r = _nonneg("r_max", r_max)
    return 4.0 * m * m * r * r


def default_attention_grad_constant(n: int) -> float:
    """Linear-in-n constant used when no calibrated value is supplied."""
    if n < 2:
        raise InvalidInputError("attention needs at least two modalities")
    return 4.0 * n


def attention_grad_bound(c_n: float, m_max: float, r_max: float) -> float:
    c = _nonneg("c_n", c_n)
    m = _nonneg("m_max", m_max)
    r = _nonneg("r_max", r_max)
    return c * m ** 3 * r


def mlp_func_lipschitz(layer_weights: Sequence, activation_lipschitz: Sequence[float]) -> float:
    """Product of per-layer spectral norms times activation constants."""
    if len(layer_weights) == 0:
        raise InvalidInputError("need at least one layer")
    if len(layer_weights) != len(activation_lipschitz):
        raise InvalidInputError(
            f"{len(layer_weights)} weight matrices but {len(activation_lipschitz)} activation constants"
        )
    out = 1.0
    for i, (w, ls) in enumerate(zip(layer_weights, activation_lipschitz)):
        out *= spectral_norm(w) * _nonneg(f"activation_lipschitz[{i}]", ls)
    return out


def max_norm(rows) -> float:
    """Largest Euclidean row norm; used to measure C, R or B-type constants from data."""
    a = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if a.size == 0:
        raise InvalidInputError("no rows to measure")
    return float(np.max(np.linalg.norm(a.reshape(a.shape[0], -1), axis=1)))
