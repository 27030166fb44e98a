"""Deterministic feature fusion of the text-spotting branch.

Detector boxes and recogniser features come from files; this module only does
the tensor math that joins them:

* ``crop_regions`` copies integer-aligned windows out of a detector feature map.
* ``adapter`` is linear -> activation -> linear over token rows.
* ``bridge_fuse`` computes ``F_rec + Linear(MHA(Conv1x1(F_crop)))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, RangeError, ShapeError
from .featuremap import FeatureMap
from .numerics import AttentionParams, as_matrix, linear, make_rng, mha, xavier_uniform

__all__ = [
    "ACTIVATIONS",
    "BridgeParams",
    "Region",
    "adapter",
    "bridge_fuse",
    "crop_regions",
    "spot_fuse",
]


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


ACTIVATIONS = {
    "relu": lambda x: np.maximum(x, 0.0),
    "gelu": _gelu,
    "tanh": np.tanh,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class Region:
    """Half-open cell window ``[x0, x1) x [y0, y1)`` on an H x W grid."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise RangeError(f"empty or inverted region {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @classmethod
    def from_box(cls, box) -> "Region":
        if len(box) != 4:
            raise RangeError(f"box must have 4 coordinates, got {box!r}")
        return cls(*(int(v) for v in box))


def crop_regions(fm: FeatureMap, regions) -> list[FeatureMap]:
    _, h, w = fm.shape
    out = []
    for r in regions:
        if r.x0 < 0 or r.y0 < 0 or r.x1 > w or r.y1 > h:
            raise RangeError(f"region {r} outside {h}x{w} grid")
        out.append(FeatureMap(fm.values[:, r.y0:r.y1, r.x0:r.x1]))
    return out


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BridgeParams:
    """Weights for the bridge and the adapter.

    ``conv_w`` (model_dim, crop_channels) is the 1x1 convolution; ``lin_w``
    (rec_channels, model_dim) maps attended tokens back onto recogniser
    channels. The adapter maps crop channels to crop channels through
    ``ada_w1`` (hidden, crop_channels) and ``ada_w2`` (crop_channels, hidden).
    """

    conv_w: np.ndarray
    conv_b: np.ndarray
    attn: AttentionParams
    lin_w: np.ndarray
    lin_b: np.ndarray
    ada_w1: np.ndarray
    ada_b1: np.ndarray
    ada_w2: np.ndarray
    ada_b2: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        for name in ("conv_w", "conv_b", "lin_w", "lin_b", "ada_w1", "ada_b1", "ada_w2", "ada_b2"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")
        dm = self.attn.model_dim
        if self.conv_w.ndim != 2 or self.conv_w.shape[0] != dm or self.conv_b.shape != (dm,):
            raise ShapeError(f"conv weights {self.conv_w.shape} do not produce model_dim {dm}")
        if self.lin_w.ndim != 2 or self.lin_w.shape[1] != dm or self.lin_b.shape != (self.lin_w.shape[0],):
            raise ShapeError(f"linear weights {self.lin_w.shape} do not consume model_dim {dm}")
        if self.ada_w1.ndim != 2 or self.ada_w2.ndim != 2 or self.ada_w2.shape[1] != self.ada_w1.shape[0]:
            raise ShapeError("adapter layer shapes do not chain")
        if self.ada_b1.shape != (self.ada_w1.shape[0],) or self.ada_b2.shape != (self.ada_w2.shape[0],):
            raise ShapeError("adapter bias shapes inconsistent")

    @property
    def crop_channels(self) -> int:
        return self.conv_w.shape[1]

    @property
    def rec_channels(self) -> int:
        return self.lin_w.shape[0]

    @classmethod
    def seeded(
        cls,
        crop_channels: int,
        rec_channels: int,
        model_dim: int = 16,
        num_heads: int = 2,
        adapter_hidden: int | None = None,
        activation: str = "relu",
        seed: int = 0,
    ) -> "BridgeParams":
        rng = make_rng(seed)
        hidden = adapter_hidden or 2 * crop_channels
        attn = AttentionParams.seeded(model_dim, num_heads, int(rng.integers(0, 2**32)))
        return cls(
            conv_w=xavier_uniform(rng, model_dim, crop_channels),
            conv_b=np.zeros(model_dim),
            attn=attn,
            lin_w=xavier_uniform(rng, rec_channels, model_dim),
            lin_b=np.zeros(rec_channels),
            ada_w1=xavier_uniform(rng, hidden, crop_channels),
            ada_b1=np.zeros(hidden),
            ada_w2=xavier_uniform(rng, crop_channels, hidden),
            ada_b2=np.zeros(crop_channels),
            activation=activation,
        )

    def replace(self, **changes) -> "BridgeParams":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return BridgeParams(**fields)


def adapter(x, params: BridgeParams) -> np.ndarray:
    x = as_matrix(x, "x")
    if x.shape[1] != params.ada_w1.shape[1]:
        raise ShapeError(f"adapter expects {params.ada_w1.shape[1]} columns, got {x.shape[1]}")
    hidden = ACTIVATIONS[params.activation](linear(x, params.ada_w1, params.ada_b1))
    return linear(hidden, params.ada_w2, params.ada_b2)


def bridge_fuse(f_rec: FeatureMap, f_crop: FeatureMap, params: BridgeParams) -> FeatureMap:
    if f_rec.shape[1:] != f_crop.shape[1:]:
        raise ShapeError(f"recogniser grid {f_rec.shape[1:]} differs from crop grid {f_crop.shape[1:]}")
    if f_crop.channels != params.crop_channels:
        raise ShapeError(f"crop has {f_crop.channels} channels, bridge expects {params.crop_channels}")
    if f_rec.channels != params.rec_channels:
        raise ShapeError(f"recogniser features have {f_rec.channels} channels, bridge expects {params.rec_channels}")
    tokens = linear(f_crop.tokens(), params.conv_w, params.conv_b)
    attended = mha(tokens, tokens, tokens, params.attn)
    delta = linear(attended, params.lin_w, params.lin_b)
    _, h, w = f_rec.shape
    return FeatureMap(f_rec.values + delta.T.reshape(f_rec.channels, h, w))


def spot_fuse(f_sts: FeatureMap, region: Region, f_rec: FeatureMap, params: BridgeParams, use_adapter: bool = True) -> FeatureMap:
    """Crop one detector region, optionally refine it with the adapter, then bridge."""
    (crop,) = crop_regions(f_sts, [region])
    if use_adapter:
        refined = adapter(crop.tokens(), params)
        crop = FeatureMap.from_tokens(refined, crop.height, crop.width)
    return bridge_fuse(f_rec, crop, params)
