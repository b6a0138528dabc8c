"""Sampling-based estimates of Lipschitz constants of functions and their gradients.

Pairs are drawn in fixed-size chunks, each with its own child stream of a
``numpy.random.SeedSequence``. A chunk's draws do not depend on how many
attempts were requested in total or on how chunks are spread over workers,
so results are reproducible across worker counts and a larger ``n_samples``
only ever adds pairs to those of a smaller one.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateDomainError, InvalidInputError, NonFiniteOutputError
from .fusion import attention_forward_batch, attention_full_jacobian_batch
from .linalg import spectral_norm

__all__ = [
    "SamplingDomain",
    "LipschitzEstimate",
    "CHUNK",
    "estimate_function_lipschitz",
    "estimate_gradient_lipschitz",
    "estimate_model_lipschitz",
    "attention_lipschitz",
    "calibrate_attention_grad_constant",
    "random_attention_instance",
]

CHUNK = 1024
DEFAULT_EPSILON = 1e-9


@dataclass(frozen=True)
class SamplingDomain:
    dim: int
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidInputError("domain dim must be at least 1")
        if not (np.isfinite(self.low) and np.isfinite(self.high)) or not self.low < self.high:
            raise InvalidInputError(f"need finite low < high, got [{self.low}, {self.high}]")

    @property
    def radius(self) -> float:
        """Largest Euclidean norm of a point in the box."""
        return float(np.sqrt(self.dim) * max(abs(self.low), abs(self.high)))


@dataclass(frozen=True)
class LipschitzEstimate:
    value: float
    pairs_evaluated: int
    pairs_skipped: int
    seed: int
    statistic: str = "gradient"


def _batch_eval(fn: Callable, X: np.ndarray, batched: bool) -> np.ndarray:
    if batched:
        out = np.asarray(fn(X), dtype=np.float64)
    else:
        out = np.stack([np.asarray(fn(x), dtype=np.float64) for x in X])
    out = out.reshape(X.shape[0], -1)
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise NonFiniteOutputError(f"non-finite output at sample {X[i]!r}", sample=X[i].copy())
    return out


def _chunk_stats(fn, draw, n_attempts, epsilon, batched):
    X, Y = draw(n_attempts)
    dist = np.linalg.norm(X - Y, axis=1)
    valid = dist > epsilon
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, 0, n_attempts
    X, Y, dist = X[valid], Y[valid], dist[valid]
    fx = _batch_eval(fn, X, batched)
    fy = _batch_eval(fn, Y, batched)
    ratios = np.linalg.norm(fx - fy, axis=1) / dist
    return float(ratios.max()), n_valid, n_attempts - n_valid


def _run(fn, make_draw, n_samples, epsilon, seed, batched, workers, statistic):
    if n_samples < 1:
        raise InvalidInputError("n_samples must be at least 1")
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    n_chunks = -(-n_samples // CHUNK)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    sizes = [min(CHUNK, n_samples - c * CHUNK) for c in range(n_chunks)]

    def work(c):
        return _chunk_stats(fn, make_draw(np.random.default_rng(children[c])), sizes[c], epsilon, batched)

    if workers > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(work, range(n_chunks)))
    else:
        results = [work(c) for c in range(n_chunks)]

    evaluated = sum(r[1] for r in results)
    skipped = sum(r[2] for r in results)
    if evaluated == 0:
        raise DegenerateDomainError(f"all {n_samples} sampled pairs were closer than epsilon={epsilon}")
    value = max(r[0] for r in results)
    return LipschitzEstimate(value, evaluated, skipped, seed, statistic)


def _box_draw(domain: SamplingDomain):
    def make(rng):
        def draw(m):
            # x and y of a pair are interleaved so a shorter run reads a prefix of the stream
            pts = rng.uniform(domain.low, domain.high, size=(m, 2, domain.dim))
            return pts[:, 0], pts[:, 1]
        return draw
    return make


def estimate_function_lipschitz(
    f: Callable,
    domain: SamplingDomain,
    n_samples: int,
    epsilon: float = DEFAULT_EPSILON,
    seed: int = 0,
    *,
    batched: bool = False,
    workers: int = 1,
) -> LipschitzEstimate:
    """Max of ``|f(x) - f(y)| / |x - y|`` over uniform pairs in the box ``domain``.

    ``f`` maps a vector to a vector (or matrix, compared by Frobenius norm).
    With ``batched=True`` it receives a ``(m, dim)`` array and must return
    one output per row.
    """
    return _run(f, _box_draw(domain), n_samples, epsilon, seed, batched, workers, "function")


def estimate_gradient_lipschitz(
    grad_f: Callable,
    domain: SamplingDomain,
    n_samples: int,
    epsilon: float = DEFAULT_EPSILON,
    seed: int = 0,
    *,
    batched: bool = False,
    workers: int = 1,
) -> LipschitzEstimate:
    """Max of ``|grad_f(x) - grad_f(y)| / |x - y|`` over uniform pairs in the box.

    Pairs no farther apart than ``epsilon`` are skipped but still count as
    attempts, so ``pairs_evaluated + pairs_skipped == n_samples``.
    """
    return _run(grad_f, _box_draw(domain), n_samples, epsilon, seed, batched, workers, "gradient")


def estimate_model_lipschitz(
    model_part,
    data_sample,
    n_pairs: int,
    epsilon: float = DEFAULT_EPSILON,
    seed: int = 0,
    *,
    statistic: str = "gradient",
    workers: int = 1,
) -> LipschitzEstimate:
    """Lipschitz estimate of an encoder or decoder over pairs of data points.

    ``model_part`` must provide batched ``forward(X)`` and
    ``input_jacobian(X)``. Pairs are drawn uniformly with replacement from
    ``data_sample``; ``statistic`` selects the input-Jacobian map
    (``"gradient"``) or the forward map itself (``"function"``).
    """
    data = np.asarray(data_sample, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise DegenerateDomainError("need at least two data points")
    spread = np.linalg.norm(data - data[0], axis=1)
    if not np.any(spread > epsilon):
        raise DegenerateDomainError("data points are all within epsilon of each other")
    if statistic == "gradient":
        fn = model_part.input_jacobian
    elif statistic == "function":
        fn = model_part.forward
    else:
        raise InvalidInputError(f"unknown statistic {statistic!r}")
    n = data.shape[0]

    def make(rng):
        def draw(m):
            idx = rng.integers(0, n, size=(m, 2))
            return data[idx[:, 0]], data[idx[:, 1]]
        return draw

    return _run(fn, make, n_pairs, epsilon, seed, True, workers, statistic)


def attention_lipschitz(
    weights,
    half_width: float,
    n_samples: int,
    epsilon: float = DEFAULT_EPSILON,
    seed: int = 0,
    statistic: str = "gradient",
) -> LipschitzEstimate:
    """Estimate for the raw attention map with every latent drawn from ``[-h, h]^d``.

    Each modality's latent then has norm at most ``R = sqrt(d) * h``. The
    gradient statistic compares full ``(n d) x (n d)`` Jacobians.
    """
    ws = [np.asarray(w, dtype=np.float64) for w in weights]
    n, d = len(ws), ws[0].shape[0]
    dom = SamplingDomain(n * d, -half_width, half_width)
    if statistic == "gradient":
        def fn(X):
            return attention_full_jacobian_batch(ws, X.reshape(-1, n, d))
        return estimate_gradient_lipschitz(fn, dom, n_samples, epsilon, seed, batched=True)
    if statistic == "function":
        def fn(X):
            return attention_forward_batch(ws, X.reshape(-1, n, d))[0]
        return estimate_function_lipschitz(fn, dom, n_samples, epsilon, seed, batched=True)
    raise InvalidInputError(f"unknown statistic {statistic!r}")


def calibrate_attention_grad_constant(
    n: int,
    d: int,
    n_instances: int = 200,
    n_pairs: int = 1000,
    seed: int = 0,
    safety: float = 1.5,
) -> float:
    """Empirical C_n: ``safety`` times the largest observed ``L / (M^3 R)``.

    Instances draw ``W_i`` with i.i.d. ``N(0, 1/d)`` entries and a half-width
    in ``[0.1, 1]``; the same distribution should be used when the constant
    is checked.
    """
    if n < 2 or d < 1:
        raise InvalidInputError("need n >= 2 and d >= 1")
    worst = 0.0
    for child in np.random.SeedSequence(seed).spawn(n_instances):
        ws, h = random_attention_instance(np.random.default_rng(child), n, d)
        m = max(spectral_norm(w) for w in ws)
        r = np.sqrt(d) * h
        est = attention_lipschitz(ws, h, n_pairs, seed=int(child.generate_state(1)[0]))
        worst = max(worst, est.value / (m ** 3 * r))
    return safety * worst


def random_attention_instance(rng: np.random.Generator, n: int, d: int):
    ws = [rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(n)]
    return ws, float(rng.uniform(0.1, 1.0))
