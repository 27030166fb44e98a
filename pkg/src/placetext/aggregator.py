"""Bag-of-queries attention aggregation of feature tokens into a global descriptor.

Each block ``i`` holds learnable queries ``Q``. The block refines them with
self-attention plus a residual, passes the running token features through one
encoder step, and cross-attends the refined queries to those features. Block
outputs are flattened (query-major, then dimension) in ascending block order,
concatenated, linearly projected and L2-normalised.

There are no positional encodings, so the descriptor does not depend on the
order of the input tokens.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .featuremap import FeatureMap
from .numerics import AttentionParams, as_matrix, linear, make_rng, mha, xavier_uniform

__all__ = [
    "BoqBlockParams",
    "BoqConfig",
    "BoqParams",
    "EncoderParams",
    "aggregate",
    "aggregate_feature_map",
    "cross_attend",
    "encode_features",
    "self_refine_queries",
]


@dataclass(frozen=True)
class BoqConfig:
    num_blocks: int = 2
    num_queries: int = 8
    model_dim: int = 16
    num_heads: int = 2
    # 16384 is the deployed descriptor size; 64 keeps brute-force checks cheap.
    output_dim: int = 64
    ff_dim: int | None = None

    def __post_init__(self):
        for name in ("num_blocks", "num_queries", "model_dim", "num_heads", "output_dim"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.model_dim % self.num_heads:
            raise ParameterError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.ff_dim is not None and self.ff_dim < 1:
            raise ParameterError("ff_dim must be >= 1")

    @property
    def hidden_dim(self) -> int:
        return self.ff_dim if self.ff_dim is not None else 2 * self.model_dim


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """Residual self-attention followed by a residual ReLU feed-forward."""

    attn: AttentionParams
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        dm = self.attn.model_dim
        hidden = self.w1.shape[0]
        if self.w1.shape != (hidden, dm) or self.w2.shape != (dm, hidden):
            raise ShapeError(f"feed-forward shapes {self.w1.shape}, {self.w2.shape} inconsistent with model_dim {dm}")
        if self.b1.shape != (hidden,) or self.b2.shape != (dm,):
            raise ShapeError("feed-forward bias shapes inconsistent")

    @classmethod
    def zeros(cls, model_dim: int, num_heads: int, hidden: int) -> "EncoderParams":
        z = np.zeros((model_dim, model_dim))
        attn = AttentionParams.identity(model_dim, num_heads).with_output(z)
        return cls(attn, np.zeros((hidden, model_dim)), np.zeros(hidden), np.zeros((model_dim, hidden)), np.zeros(model_dim))


@dataclass(frozen=True, eq=False)
class BoqBlockParams:
    queries: np.ndarray
    self_attn: AttentionParams
    cross_attn: AttentionParams
    encoder: EncoderParams

    def __post_init__(self):
        object.__setattr__(self, "queries", _frozen(self.queries))


@dataclass(frozen=True, eq=False)
class BoqParams:
    config: BoqConfig
    blocks: tuple[BoqBlockParams, ...]
    proj_w: np.ndarray
    proj_b: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        cfg = self.config
        object.__setattr__(self, "blocks", tuple(self.blocks))
        object.__setattr__(self, "proj_w", _frozen(self.proj_w))
        object.__setattr__(self, "proj_b", _frozen(self.proj_b))
        if len(self.blocks) != cfg.num_blocks:
            raise ShapeError(f"{len(self.blocks)} blocks given, config wants {cfg.num_blocks}")
        for i, blk in enumerate(self.blocks):
            if blk.queries.shape != (cfg.num_queries, cfg.model_dim):
                raise ShapeError(f"block {i} queries have shape {blk.queries.shape}")
            for attn in (blk.self_attn, blk.cross_attn, blk.encoder.attn):
                if attn.model_dim != cfg.model_dim or attn.num_heads != cfg.num_heads:
                    raise ShapeError(f"block {i} attention dims disagree with config")
        flat = cfg.num_blocks * cfg.num_queries * cfg.model_dim
        if self.proj_w.shape != (cfg.output_dim, flat) or self.proj_b.shape != (cfg.output_dim,):
            raise ShapeError(f"projection shape {self.proj_w.shape} should be {(cfg.output_dim, flat)}")

    @classmethod
    def seeded(cls, config: BoqConfig, seed: int) -> "BoqParams":
        rng = make_rng(seed)
        dm, nh, hid = config.model_dim, config.num_heads, config.hidden_dim

        def child() -> int:
            return int(rng.integers(0, 2**32))

        blocks = []
        for _ in range(config.num_blocks):
            queries = rng.uniform(-1.0, 1.0, size=(config.num_queries, dm))
            self_attn = AttentionParams.seeded(dm, nh, child())
            cross_attn = AttentionParams.seeded(dm, nh, child())
            enc_attn = AttentionParams.seeded(dm, nh, child())
            encoder = EncoderParams(
                enc_attn,
                xavier_uniform(rng, hid, dm),
                np.zeros(hid),
                xavier_uniform(rng, dm, hid),
                np.zeros(dm),
            )
            blocks.append(BoqBlockParams(queries, self_attn, cross_attn, encoder))
        flat = config.num_blocks * config.num_queries * dm
        proj_w = xavier_uniform(rng, config.output_dim, flat)
        return cls(config, tuple(blocks), proj_w, np.zeros(config.output_dim), seed=seed)

    def save(self, path) -> None:
        arrays = {"proj_w": self.proj_w, "proj_b": self.proj_b}
        cfg = self.config
        arrays["config"] = np.array(
            [cfg.num_blocks, cfg.num_queries, cfg.model_dim, cfg.num_heads, cfg.output_dim, cfg.hidden_dim]
        )
        for i, blk in enumerate(self.blocks):
            arrays[f"b{i}.queries"] = blk.queries
            for tag, attn in (("self", blk.self_attn), ("cross", blk.cross_attn), ("enc", blk.encoder.attn)):
                for w in ("w_q", "w_k", "w_v", "w_o"):
                    arrays[f"b{i}.{tag}.{w}"] = getattr(attn, w)
            for w in ("w1", "b1", "w2", "b2"):
                arrays[f"b{i}.ff.{w}"] = getattr(blk.encoder, w)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "BoqParams":
        with np.load(Path(path)) as z:
            nb, nq, dm, nh, od, hid = (int(v) for v in z["config"])
            config = BoqConfig(nb, nq, dm, nh, od, hid)
            blocks = []
            for i in range(nb):
                def attn(tag):
                    return AttentionParams(nh, dm, *(z[f"b{i}.{tag}.{w}"] for w in ("w_q", "w_k", "w_v", "w_o")))

                enc = EncoderParams(attn("enc"), *(z[f"b{i}.ff.{w}"] for w in ("w1", "b1", "w2", "b2")))
                blocks.append(BoqBlockParams(z[f"b{i}.queries"], attn("self"), attn("cross"), enc))
            return cls(config, tuple(blocks), z["proj_w"], z["proj_b"])


def self_refine_queries(q, params: AttentionParams) -> np.ndarray:
    """``MHA(Q, Q, Q) + Q``."""
    q = as_matrix(q, "queries")
    if q.shape[1] != params.model_dim:
        raise ShapeError(f"queries have {q.shape[1]} columns, attention expects {params.model_dim}")
    return mha(q, q, q, params) + q


def encode_features(f, params: EncoderParams) -> np.ndarray:
    f = as_matrix(f, "features")
    if f.shape[1] != params.attn.model_dim:
        raise ShapeError(f"features have {f.shape[1]} columns, encoder expects {params.attn.model_dim}")
    x = f + mha(f, f, f, params.attn)
    hidden = np.maximum(linear(x, params.w1, params.b1), 0.0)
    return x + linear(hidden, params.w2, params.b2)


def cross_attend(q_refined, f, params: AttentionParams) -> np.ndarray:
    return mha(q_refined, f, f, params)


def aggregate(f, params: BoqParams) -> np.ndarray:
    """Descriptor of length ``output_dim`` with unit L2 norm for a (tokens, model_dim) input."""
    cfg = params.config
    f = as_matrix(f, "features")
    if f.shape[1] != cfg.model_dim:
        raise ShapeError(f"features have dim {f.shape[1]}, config expects {cfg.model_dim}")
    if f.shape[0] == 0:
        raise ShapeError("no feature tokens")
    outputs = []
    for blk in params.blocks:
        q = self_refine_queries(blk.queries, blk.self_attn)
        f = encode_features(f, blk.encoder)
        outputs.append(cross_attend(q, f, blk.cross_attn).reshape(-1))
    o = np.concatenate(outputs)
    desc = params.proj_w @ o + params.proj_b
    norm = float(np.linalg.norm(desc))
    if not np.all(np.isfinite(desc)) or not norm > 0.0:
        raise NumericError("descriptor is zero or non-finite before normalisation")
    return desc / norm


def aggregate_feature_map(fm: FeatureMap, params: BoqParams) -> np.ndarray:
    return aggregate(fm.tokens(), params)
