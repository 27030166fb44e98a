"""Dense float64 kernels: softmax, multi-head attention, affine maps.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Every
function is pure; inputs are never modified.

Parameter initialisation uses ``numpy.random.Generator(PCG64(seed))`` with
Xavier-uniform draws, which gives the same bytes on every platform for a
given seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidInputError, NumericError, ShapeError

__all__ = [
    "AttentionParams",
    "as_matrix",
    "finite_diff_grad",
    "linear",
    "make_rng",
    "mha",
    "softmax_rows",
    "xavier_uniform",
]


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite 2-D float64 array or raise."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return a


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting each row's maximum."""
    a = as_matrix(m)
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def linear(x, weight, bias=None) -> np.ndarray:
    """Affine map ``x @ weight.T + bias``; ``weight`` is (out, in)."""
    x = as_matrix(x, "x")
    w = as_matrix(weight, "weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"x has {x.shape[1]} columns, weight expects {w.shape[1]} inputs")
    out = x @ w.T
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
        out = out + b
    return out


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Weights of one multi-head attention layer.

    ``w_q``, ``w_k`` and ``w_v`` have shape (num_heads, head_dim, model_dim):
    head ``h`` projects a token with ``w_q[h] @ token``. ``w_o`` is
    (model_dim, model_dim) and is applied to the concatenated heads.
    """

    num_heads: int
    model_dim: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    seed: int | None = field(default=None)

    def __post_init__(self):
        if self.num_heads < 1 or self.model_dim < 1:
            raise ShapeError("num_heads and model_dim must be positive")
        if self.model_dim % self.num_heads:
            raise ShapeError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        hd = (self.num_heads, self.head_dim, self.model_dim)
        for name in ("w_q", "w_k", "w_v"):
            a = _frozen(getattr(self, name))
            if a.shape != hd:
                raise ShapeError(f"{name} has shape {a.shape}, expected {hd}")
            object.__setattr__(self, name, a)
        w_o = _frozen(self.w_o)
        if w_o.shape != (self.model_dim, self.model_dim):
            raise ShapeError(f"w_o has shape {w_o.shape}, expected {(self.model_dim,) * 2}")
        object.__setattr__(self, "w_o", w_o)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @classmethod
    def seeded(cls, model_dim: int, num_heads: int, seed: int) -> "AttentionParams":
        rng = make_rng(seed)
        d = model_dim // num_heads if num_heads and model_dim % num_heads == 0 else 0
        if d == 0:
            raise ShapeError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")

        def stacked():
            return xavier_uniform(rng, model_dim, model_dim).reshape(num_heads, d, model_dim)

        w_q, w_k, w_v = stacked(), stacked(), stacked()
        w_o = xavier_uniform(rng, model_dim, model_dim)
        return cls(num_heads, model_dim, w_q, w_k, w_v, w_o, seed=seed)

    @classmethod
    def identity(cls, model_dim: int, num_heads: int = 1) -> "AttentionParams":
        """Projections that slice heads out of the input and re-concatenate them."""
        if num_heads < 1 or model_dim % num_heads:
            raise ShapeError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")
        eye = np.eye(model_dim)
        stacked = eye.reshape(num_heads, model_dim // num_heads, model_dim)
        return cls(num_heads, model_dim, stacked, stacked, stacked, eye)

    def with_output(self, w_o: np.ndarray) -> "AttentionParams":
        return AttentionParams(self.num_heads, self.model_dim, self.w_q, self.w_k, self.w_v, w_o, self.seed)


def mha(q, k, v, params: AttentionParams) -> np.ndarray:
    """Multi-head scaled dot-product attention.

    Each head computes ``softmax(qh @ kh.T / sqrt(d)) @ vh`` with ``d`` the
    head dimension; heads are concatenated and multiplied by ``w_o.T``.
    Returns an array of shape (q.rows, model_dim).
    """
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    v = as_matrix(v, "v")
    dm = params.model_dim
    if q.shape[1] != dm or k.shape[1] != dm or v.shape[1] != dm:
        raise ShapeError(f"q, k, v must have {dm} columns; got {q.shape[1]}, {k.shape[1]}, {v.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"k has {k.shape[0]} rows but v has {v.shape[0]}")
    if k.shape[0] == 0:
        raise ShapeError("attention over zero keys is undefined")

    scale = 1.0 / math.sqrt(params.head_dim)
    heads = []
    for h in range(params.num_heads):
        qh = q @ params.w_q[h].T
        kh = k @ params.w_k[h].T
        vh = v @ params.w_v[h].T
        weights = softmax_rows((qh @ kh.T) * scale)
        heads.append(weights @ vh)
    return np.concatenate(heads, axis=1) @ params.w_o.T


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, same shape as ``x``."""
    if not h > 0:
        raise InvalidInputError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value while perturbing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
