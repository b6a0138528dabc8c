"""Fault detection on latent vectors: kernel PCA, Mahalanobis distance, percentile threshold."""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInputError, InvalidInputError, ShapeError
from .linalg import sym_eig

__all__ = ["Kernel", "AnomalyModel", "DetectionReport", "fit", "score", "detect", "roc_auc", "median_gamma"]

EIG_FLOOR = 1e-10
THRESHOLD_PERCENTILE = 95.0
DEFAULT_COMPONENTS = 8


@dataclass(frozen=True)
class Kernel:
    name: str = "rbf"  # "rbf" or "linear"
    gamma: Optional[float] = None  # RBF only; None selects the median heuristic at fit time

    def __post_init__(self):
        if self.name not in ("rbf", "linear"):
            raise InvalidInputError(f"unknown kernel {self.name!r}")
        if self.gamma is not None and not self.gamma > 0:
            raise InvalidInputError("gamma must be positive")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.name == "linear":
            return a @ b.T
        sq = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
        return np.exp(-self.gamma * np.maximum(sq, 0.0))


def median_gamma(x: np.ndarray) -> float:
    """``1 / (2 median^2)`` over distinct-pair distances."""
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))[np.triu_indices(x.shape[0], k=1)]
    med = float(np.median(d))
    if med == 0.0:
        raise DegenerateInputError("median pairwise distance is zero")
    return 1.0 / (2.0 * med * med)


@dataclass(frozen=True)
class AnomalyModel:
    train: np.ndarray
    kernel: Kernel
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns, one per retained component
    score_mean: np.ndarray
    score_cov_inverse: np.ndarray
    threshold: float
    # centering terms of the training Gram matrix
    gram_col_mean: np.ndarray
    gram_mean: float

    @property
    def k(self) -> int:
        return self.eigenvalues.size

    def project(self, latents) -> np.ndarray:
        x = np.atleast_2d(np.asarray(latents, dtype=np.float64))
        if x.shape[1] != self.train.shape[1]:
            raise ShapeError(f"latent dim {x.shape[1]} does not match fitted dim {self.train.shape[1]}")
        kx = self.kernel(x, self.train)
        kc = kx - kx.mean(axis=1, keepdims=True) - self.gram_col_mean[None, :] + self.gram_mean
        return kc @ (self.eigenvectors / np.sqrt(self.eigenvalues))

    def scores(self, latents) -> np.ndarray:
        diff = self.project(latents) - self.score_mean
        q = np.einsum("bi,ij,bj->b", diff, self.score_cov_inverse, diff)
        return np.sqrt(np.maximum(q, 0.0))


def fit(latents_clean, kernel: Kernel = Kernel(), k_components: int = DEFAULT_COMPONENTS) -> AnomalyModel:
    x = np.asarray(latents_clean, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InvalidInputError("need at least two latent vectors")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("latents contain non-finite values")
    if k_components < 1:
        raise InvalidInputError("k_components must be >= 1")
    m = x.shape[0]
    if m < k_components + 1:
        raise InvalidInputError(f"need at least {k_components + 1} samples for {k_components} components")
    if kernel.name == "rbf" and kernel.gamma is None:
        kernel = Kernel("rbf", median_gamma(x))

    gram = kernel(x, x)
    col_mean = gram.mean(axis=0)
    total_mean = float(gram.mean())
    centered = gram - col_mean[None, :] - col_mean[:, None] + total_mean
    centered = 0.5 * (centered + centered.T)
    vals, vecs = sym_eig(centered)
    keep = np.flatnonzero(vals[:k_components] > EIG_FLOOR)
    if keep.size == 0:
        raise DegenerateInputError("centered Gram matrix has no variance")
    if keep.size < k_components:
        warnings.warn(f"only {keep.size} of {k_components} components have eigenvalue > {EIG_FLOOR}",
                      RuntimeWarning, stacklevel=2)
    vals = np.array(vals[keep])
    vecs = np.array(vecs[:, keep])

    proj = centered @ (vecs / np.sqrt(vals))
    mu = proj.mean(axis=0)
    cov = np.atleast_2d(np.cov(proj, rowvar=False))
    eps = 1e-8 * float(np.trace(cov)) / keep.size
    cov_inv = np.linalg.inv(cov + eps * np.eye(keep.size))
    cov_inv = 0.5 * (cov_inv + cov_inv.T)

    diff = proj - mu
    d = np.sqrt(np.maximum(np.einsum("bi,ij,bj->b", diff, cov_inv, diff), 0.0))
    thr = float(np.percentile(d, THRESHOLD_PERCENTILE))
    return AnomalyModel(x.copy(), kernel, vals, vecs, mu, cov_inv, thr, col_mean, total_mean)


def score(model: AnomalyModel, latent) -> float:
    v = np.asarray(latent, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError("score takes one latent vector; use AnomalyModel.scores for batches")
    return float(model.scores(v[None, :])[0])


def roc_auc(scores, labels) -> float:
    """Probability a faulty sample outscores a clean one (ties count half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise InvalidInputError("AUC needs both clean and faulty samples")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class DetectionReport:
    scores: np.ndarray
    predicted: np.ndarray
    labels: np.ndarray
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.scores.size

    @property
    def fp_rate(self) -> float:
        neg = self.fp + self.tn
        return self.fp / neg if neg else 0.0

    @property
    def tp_rate(self) -> float:
        pos = self.tp + self.fn
        return self.tp / pos if pos else 0.0

    @property
    def precision(self) -> float:
        called = self.tp + self.fp
        return self.tp / called if called else 0.0

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    def auc(self) -> Optional[float]:
        if self.labels.all() or not self.labels.any():
            return None
        return roc_auc(self.scores, self.labels)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("index,score,predicted_faulty,true_faulty\n")
        for i, (s, p, y) in enumerate(zip(self.scores, self.predicted, self.labels)):
            buf.write(f"{i},{s!r},{int(p)},{int(y)}\n")
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "n_samples": self.n,
            "threshold": self.threshold,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "fp_rate": self.fp_rate,
            "tp_rate": self.tp_rate,
            "precision": self.precision,
            "accuracy": self.accuracy,
            "roc_auc": self.auc(),
        }


def detect(model: AnomalyModel, latents, true_labels) -> DetectionReport:
    x = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    y = np.asarray(true_labels, dtype=bool)
    if x.shape[0] == 0 or np.asarray(latents).size == 0:
        raise InvalidInputError("no latents to score")
    if y.shape != (x.shape[0],):
        raise ShapeError("need one label per latent")
    s = model.scores(x)
    pred = s > model.threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    return DetectionReport(s, pred, y, model.threshold, tp, fp, tn, fn)
