"""Dense linear algebra primitives.

Matrices and vectors are plain ``float64`` numpy arrays. The helpers
``as_matrix`` and ``as_vector`` validate shape and finiteness and return
read-only copies, so values handed around the package behave as immutable.
"""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError, ShapeError

__all__ = [
    "as_matrix",
    "as_vector",
    "SingularTriplet",
    "top_singular",
    "spectral_norm",
    "frobenius_norm",
    "sym_eig",
]

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 1000


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return _frozen(a)


def as_vector(v, name: str = "vector") -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite entries")
    return _frozen(a)


class SingularTriplet(NamedTuple):
    sigma: float
    u: np.ndarray  # left singular vector, ``m @ v = sigma * u``
    v: np.ndarray  # right singular vector
    converged: bool
    iterations: int


def _start_vector(m: np.ndarray) -> np.ndarray:
    n = m.shape[1]
    x = np.full(n, 1.0 / np.sqrt(n))
    scale = np.linalg.norm(m)
    # all-ones start in (or numerically near) the null space: tilt it
    # towards successive basis vectors until it catches the row space
    for j in range(n):
        if np.linalg.norm(m @ x) > 1e-12 * scale:
            break
        x = x.copy()
        x[j] += 1.0
        x /= np.linalg.norm(x)
    return x


def top_singular(m, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> SingularTriplet:
    """Largest singular value and vectors by power iteration on ``m.T @ m``.

    Iteration stops once the relative change of the singular value estimate
    drops to ``tol``. If ``max_iter`` is hit first the best iterate is
    returned with ``converged=False``.
    """
    m = as_matrix(m)
    if tol <= 0:
        raise InvalidInputError("tol must be positive")
    if max_iter < 1:
        raise InvalidInputError("max_iter must be at least 1")

    rows, cols = m.shape
    if not np.any(m):
        u = np.zeros(rows)
        u[0] = 1.0
        v = np.zeros(cols)
        v[0] = 1.0
        return SingularTriplet(0.0, u, v, True, 0)

    # work on a max-entry-scaled copy so m.T @ m neither underflows nor overflows
    scale = float(np.max(np.abs(m)))
    m = m / scale
    v = _start_vector(m)
    sigma = np.linalg.norm(m @ v)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        w = m.T @ (m @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            break
        v = w / nw
        new_sigma = np.linalg.norm(m @ v)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            sigma = new_sigma
            converged = True
            break
        sigma = new_sigma
    mv = m @ v
    u = mv / sigma if sigma > 0 else mv
    return SingularTriplet(float(sigma * scale), u, v, converged, it)


def spectral_norm(m, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Largest singular value of ``m``; warns if power iteration did not converge."""
    trip = top_singular(m, tol=tol, max_iter=max_iter)
    if not trip.converged:
        warnings.warn(
            f"power iteration stopped after {trip.iterations} iterations without reaching tol={tol}",
            RuntimeWarning,
            stacklevel=2,
        )
    return trip.sigma


def frobenius_norm(m) -> float:
    m = as_matrix(m)
    return float(np.sqrt(np.sum(m * m)))


def _round_robin(n: int) -> list[list[tuple[int, int]]]:
    """Disjoint index pairs for each round of a parallel-ordered Jacobi sweep."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p >= 0 and q >= 0:
                pairs.append((min(p, q), max(p, q)))
        rounds.append(pairs)
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


JACOBI_AUTO_LIMIT = 128


def sym_eig(m, method: str = "auto", max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix.

    ``method="jacobi"`` runs cyclic Jacobi rotations. Rotations within one
    round of the round-robin ordering act on disjoint index pairs, so each
    round is applied as a single vectorized update. ``method="lapack"``
    defers to ``numpy.linalg.eigh``; ``"auto"`` picks Jacobi up to
    ``JACOBI_AUTO_LIMIT`` rows and LAPACK beyond, where the O(n^3) sweeps
    get slow in Python.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = np.array(as_matrix(m))
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"sym_eig needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise InvalidInputError("sym_eig input is not symmetric")
    a = 0.5 * (a + a.T)
    if method == "auto":
        method = "jacobi" if n <= JACOBI_AUTO_LIMIT else "lapack"
    if method == "lapack":
        vals, vecs = np.linalg.eigh(a)
        order = np.argsort(-vals, kind="stable")
        return _frozen(vals[order]), _frozen(vecs[:, order])
    if method != "jacobi":
        raise InvalidInputError(f"unknown eigensolver method {method!r}")
    vecs = np.eye(n)

    if n > 1:
        rounds = [
            (np.array([p for p, _ in r]), np.array([q for _, q in r])) for r in _round_robin(n)
        ]
        for _ in range(max_sweeps):
            rotated = False
            for p, q in rounds:
                apq = a[p, q]
                app = a[p, p]
                aqq = a[q, q]
                # negligible couplings are left alone; a sweep with none left ends the loop
                active = np.abs(apq) > 1e-17 * (np.abs(app) + np.abs(aqq)) + 1e-300
                if not np.any(active):
                    continue
                rotated = True
                safe_apq = np.where(active, apq, 1.0)
                theta = (aqq - app) / (2.0 * safe_apq)
                big = np.abs(theta) > 1e150
                theta_c = np.where(big, 1.0, theta)
                sgn = np.where(theta_c >= 0.0, 1.0, -1.0)
                t = sgn / (np.abs(theta_c) + np.sqrt(theta_c * theta_c + 1.0))
                t = np.where(big, 0.5 / np.where(big, theta, 1.0), t)
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c[:, None] * rp - s[:, None] * rq
                a[q, :] = s[:, None] * rp + c[:, None] * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = cp * c - cq * s
                a[:, q] = cp * s + cq * c
                vp = vecs[:, p].copy()
                vq = vecs[:, q].copy()
                vecs[:, p] = vp * c - vq * s
                vecs[:, q] = vp * s + vq * c
            if not rotated:
                break

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return _frozen(vals[order]), _frozen(vecs[:, order])
