"""Fully connected encoder/decoder networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError, ShapeError
from ..linalg import spectral_norm
from . import tape

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple
    activation: tuple  # one entry per hidden layer

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise InvalidInputError(f"need at least two positive widths, got {widths}")
        acts = self.activation
        if isinstance(acts, str):
            acts = (acts,) * (len(widths) - 2)
        acts = tuple(str(a).lower() for a in acts)
        if len(acts) != len(widths) - 2:
            raise InvalidInputError(f"{len(widths) - 2} hidden layers but {len(acts)} activations")
        for a in acts:
            if a not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {a!r}")
        object.__setattr__(self, "layer_widths", widths)
        object.__setattr__(self, "activation", acts)

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def mirrored(self) -> "MlpSpec":
        return MlpSpec(self.layer_widths[::-1], self.activation[::-1])

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths), "activation": list(self.activation)}


class Mlp:
    """Affine layers with per-hidden-layer activations and a linear output.

    Weights are ``(out, in)`` matrices; all methods take batches of row
    vectors.
    """

    def __init__(self, spec: MlpSpec, weights, biases):
        self.spec = spec
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        widths = spec.layer_widths
        if len(self.weights) != spec.n_layers or len(self.biases) != spec.n_layers:
            raise ShapeError("layer count does not match spec")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ShapeError(f"layer {i} has W{w.shape}, b{b.shape}; spec wants {(widths[i + 1], widths[i])}")

    @classmethod
    def init(cls, spec: MlpSpec, rng: np.random.Generator) -> "Mlp":
        ws, bs = [], []
        for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            bs.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(spec, ws, bs)

    @property
    def in_dim(self) -> int:
        return self.spec.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.spec.layer_widths[-1]

    def _activations(self):
        return list(self.spec.activation) + ["identity"]

    def forward(self, X) -> np.ndarray:
        h = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if h.shape[1] != self.in_dim:
            raise ShapeError(f"expected input width {self.in_dim}, got {h.shape[1]}")
        for w, b, act in zip(self.weights, self.biases, self._activations()):
            h = h @ w.T + b
            if act == "relu":
                h = np.maximum(h, 0.0)
        return h

    def _masks(self, X):
        h = np.atleast_2d(np.asarray(X, dtype=np.float64))
        masks, inputs = [], []
        for w, b, act in zip(self.weights, self.biases, self._activations()):
            inputs.append(h)
            z = h @ w.T + b
            m = (z > 0).astype(np.float64) if act == "relu" else np.ones_like(z)
            masks.append(m)
            h = z * m
        return masks, inputs

    def input_jacobian(self, X) -> np.ndarray:
        """``(batch, out, in)`` Jacobians with respect to the input."""
        masks, _ = self._masks(X)
        J = np.broadcast_to(self.weights[0], (masks[0].shape[0],) + self.weights[0].shape) * masks[0][:, :, None]
        for w, m in zip(self.weights[1:], masks[1:]):
            J = np.einsum("oh,bhi->boi", w, J) * m[:, :, None]
        return J

    def param_jacobian_norm(self, X) -> np.ndarray:
        """Frobenius norm of d(output)/d(parameters) per sample."""
        masks, inputs = self._masks(X)
        bsz = masks[0].shape[0]
        # G = d output / d pre-activation of the current layer, (batch, out, width)
        G = np.broadcast_to(np.eye(self.out_dim), (bsz, self.out_dim, self.out_dim)) * masks[-1][:, None, :]
        sq = np.zeros(bsz)
        for layer in range(self.spec.n_layers - 1, -1, -1):
            g2 = np.sum(G * G, axis=(1, 2))
            sq += g2 * (1.0 + np.sum(inputs[layer] ** 2, axis=1))
            if layer > 0:
                G = np.einsum("boh,hi->boi", G, self.weights[layer]) * masks[layer - 1][:, None, :]
        return np.sqrt(sq)

    def lipschitz_upper(self) -> float:
        from ..bounds import mlp_func_lipschitz

        return mlp_func_lipschitz(self.weights, [1.0] * self.spec.n_layers)

    def layer_spectral_norms(self) -> list[float]:
        return [spectral_norm(w) for w in self.weights]

    def tape_forward(self, params: list, x: tape.Var) -> tape.Var:
        """Same computation on the tape; ``params`` alternates W, b Vars."""
        h = x
        for i, act in enumerate(self._activations()):
            h = tape.linear(h, params[2 * i], params[2 * i + 1])
            if act == "relu":
                h = tape.relu(h)
        return h
