"""Multi-similarity loss over a labelled descriptor batch, with analytic gradient.

For row ``i`` the positive set is every other row with the same label and the
negative set is every row with a different label (no hard-pair mining)::

    L = mean_i [ log(1 + sum_P exp(-alpha (s_ij - lam))) / alpha
               + log(1 + sum_N exp( beta (s_ij - lam))) / beta ]

``s_ij`` is the cosine similarity of rows ``i`` and ``j``. Both log terms are
evaluated as a log-sum-exp that includes the constant 1 (an extra zero logit).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ParameterError, ShapeError

__all__ = [
    "LabeledBatch",
    "LossHyperparams",
    "cosine_similarity",
    "ms_loss",
    "ms_loss_from_similarities",
    "ms_loss_grad",
    "ms_loss_grad_raw",
    "ms_loss_raw",
    "pair_masks",
    "relative_gradient_error",
]


@dataclass(frozen=True)
class LossHyperparams:
    """Configuration defaults; not values taken from any published training run."""

    alpha: float = 1.0
    beta: float = 50.0
    lam: float = 0.5

    def __post_init__(self):
        if not self.alpha > 0 or not self.beta > 0:
            raise ParameterError("alpha and beta must be positive")
        if not np.isfinite(self.lam):
            raise ParameterError("lambda must be finite")


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    descriptors: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.array(self.descriptors, dtype=np.float64, copy=True)
        labels = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] < 1:
            raise InvalidInputError(f"descriptors must be a non-empty N x D matrix, got {x.shape}")
        if labels.shape != (x.shape[0],):
            raise InvalidInputError(f"{labels.shape} labels for {x.shape[0]} descriptors")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("descriptors contain non-finite values")
        norms = np.linalg.norm(x, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-8):
            raise InvalidInputError(f"rows must be L2-normalised; max deviation {np.max(np.abs(norms - 1.0)):.3g}")
        x.setflags(write=False)
        object.__setattr__(self, "descriptors", x)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def normalized(cls, descriptors, labels) -> "LabeledBatch":
        x = np.asarray(descriptors, dtype=np.float64)
        return cls(x / np.linalg.norm(x, axis=1, keepdims=True), labels)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"vectors must be 1-D and equal length, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def pair_masks(labels) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    return pos, ~same


def _log1p_sum_exp(z: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``log(1 + sum_{mask} exp(z))`` and the softmax weights of the masked terms."""
    zm = np.where(mask, z, -np.inf)
    m = np.maximum(zm.max(axis=1), 0.0)
    e = np.where(mask, np.exp(zm - m[:, None]), 0.0)
    total = np.exp(-m) + e.sum(axis=1)
    return m + np.log(total), e / total[:, None]


def _terms(s: np.ndarray, labels, h: LossHyperparams):
    pos, neg = pair_masks(labels)
    lse_p, w_p = _log1p_sum_exp(-h.alpha * (s - h.lam), pos)
    lse_n, w_n = _log1p_sum_exp(h.beta * (s - h.lam), neg)
    return lse_p / h.alpha + lse_n / h.beta, w_p, w_n


def ms_loss_from_similarities(s, labels, h: LossHyperparams = LossHyperparams()) -> float:
    """Loss for an explicit N x N similarity matrix (diagonal ignored)."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] != len(labels):
        raise ShapeError(f"similarity matrix {s.shape} does not match {len(labels)} labels")
    per_row, _, _ = _terms(s, labels, h)
    return float(per_row.mean())


def _unit_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise InvalidInputError("zero descriptor row")
    return x / norms[:, None], norms


def ms_loss_raw(descriptors, labels, h: LossHyperparams = LossHyperparams()) -> float:
    """Loss for unnormalised rows; similarities are cosines, so scale does not matter."""
    x = np.asarray(descriptors, dtype=np.float64)
    u, _ = _unit_rows(x)
    return ms_loss_from_similarities(u @ u.T, labels, h)


def ms_loss(batch: LabeledBatch, h: LossHyperparams = LossHyperparams()) -> float:
    return ms_loss_raw(batch.descriptors, batch.labels, h)


def ms_loss_grad_raw(descriptors, labels, h: LossHyperparams = LossHyperparams()) -> np.ndarray:
    x = np.asarray(descriptors, dtype=np.float64)
    u, norms = _unit_rows(x)
    n = x.shape[0]
    _, w_p, w_n = _terms(u @ u.T, labels, h)
    # dL/ds_ij for the term owned by row i
    g = (w_n - w_p) / n
    a = g + g.T
    du = a @ u
    # project through the Jacobian of x -> x / |x|
    radial = np.sum(du * u, axis=1, keepdims=True)
    return (du - radial * u) / norms[:, None]


def ms_loss_grad(batch: LabeledBatch, h: LossHyperparams = LossHyperparams()) -> np.ndarray:
    return ms_loss_grad_raw(batch.descriptors, batch.labels, h)


def relative_gradient_error(analytic, numeric, floor: float = 1e-7) -> float:
    """Largest ``|a - f| / max(|a|, |f|)`` over entries that disagree by more than ``floor``."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    diff = np.abs(a - f)
    scale = np.maximum(np.abs(a), np.abs(f))
    rel = np.where(diff > floor, diff / np.where(scale > 0, scale, 1.0), 0.0)
    return float(rel.max()) if rel.size else 0.0
