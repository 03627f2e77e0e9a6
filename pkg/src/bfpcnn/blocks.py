"""Composite blocks: inception (multi-scale parallel convolutions), single-head
self-attention over spatial positions, multi-dilation spatial attention,
residual blocks, and their granular-feature composition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ChannelMismatch, DimMismatch, ShapeChange
from .layers import (
    BatchNormParams,
    Conv2DParams,
    Mode,
    batchnorm,
    concat_depth,
    conv2d,
    dropout,
    he_uniform,
    maxpool2d,
    relu,
)
from .tensor import Tensor, apply_op, bmm, matmul
from .layers import softmax as softmax_rows


@dataclass(frozen=True)
class InceptionConfig:
    """Filter counts for the four parallel paths: 1x1 / 1x1->3x3 / 1x1->5x5 /
    pool->1x1. Output depth is f11 + f22 + f32 + f41."""

    f11: int
    f21: int
    f22: int
    f31: int
    f32: int
    f41: int

    def __post_init__(self):
        if min(self.f11, self.f21, self.f22, self.f31, self.f32, self.f41) < 1:
            raise ValueError("all inception filter counts must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.f11 + self.f22 + self.f32 + self.f41


@dataclass
class InceptionParams:
    p1: Conv2DParams
    p2a: Conv2DParams
    p2b: Conv2DParams
    p3a: Conv2DParams
    p3b: Conv2DParams
    p4: Conv2DParams

    @classmethod
    def create(cls, rng: np.random.Generator, in_ch: int,
               cfg: InceptionConfig) -> "InceptionParams":
        return cls(
            p1=Conv2DParams.create(rng, in_ch, cfg.f11, 1),
            p2a=Conv2DParams.create(rng, in_ch, cfg.f21, 1),
            p2b=Conv2DParams.create(rng, cfg.f21, cfg.f22, 3),
            p3a=Conv2DParams.create(rng, in_ch, cfg.f31, 1),
            p3b=Conv2DParams.create(rng, cfg.f31, cfg.f32, 5),
            p4=Conv2DParams.create(rng, in_ch, cfg.f41, 1),
        )


def inception_block(x: Tensor, cfg: InceptionConfig, params: InceptionParams) -> Tensor:
    """Four parallel paths, same-padded and stride 1, relu after every conv,
    concatenated along depth in path order."""
    p1 = relu(conv2d(x, params.p1))
    p2 = relu(conv2d(relu(conv2d(x, params.p2a)), params.p2b))
    p3 = relu(conv2d(relu(conv2d(x, params.p3a)), params.p3b))
    pooled = maxpool2d(x, 2, 1, padding="same")
    p4 = relu(conv2d(pooled, params.p4))
    return concat_depth(concat_depth(concat_depth(p1, p2), p3), p4)


@dataclass
class SelfAttentionParams:
    """Projections for single-head attention over spatial positions."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    scale: float
    attn_dropout: float = 0.1
    out_dropout: float = 0.1

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int, d_k: int | None = None,
               attn_dropout: float = 0.1, out_dropout: float = 0.1) -> "SelfAttentionParams":
        d_k = channels if d_k is None else d_k
        scale = float(np.float32(1.0) / np.sqrt(np.float32(d_k)))
        return cls(
            wq=he_uniform(rng, (channels, d_k), channels),
            wk=he_uniform(rng, (channels, d_k), channels),
            wv=he_uniform(rng, (channels, d_k), channels),
            wo=he_uniform(rng, (d_k, channels), d_k),
            scale=scale,
            attn_dropout=attn_dropout,
            out_dropout=out_dropout,
        )


def _gather_positions(x: Tensor, idx: np.ndarray) -> Tensor:
    """Reorder the position axis of [N, T, C] by a per-sample permutation."""
    n, t, _ = x.shape
    rows = idx[:, :, None]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            scattered = np.zeros_like(g)
            np.put_along_axis(scattered, rows, g, axis=1)
            x.grad += scattered

    return apply_op("gather_positions", (x,),
                    np.take_along_axis(x.data, rows, axis=1), backward)


def self_attention(x: Tensor, p: SelfAttentionParams, mode: Mode,
                   rng: np.random.Generator | None = None, residual: bool = True,
                   return_attn: bool = False):
    """Scaled dot-product attention across the H*W spatial positions.

    Positions are internally reordered into a canonical order derived from
    their feature vectors before any reduction over the position axis runs,
    and restored afterwards. Every sum over positions therefore sees the
    same operand bytes whatever order the caller supplied, which makes the
    op bitwise equivariant under position permutations.

    Returns the output tensor, or (output, attention) with ``return_attn``
    where attention is the row-stochastic matrix in canonical order.
    """
    n, c, h, w = x.shape
    if p.wq.shape[0] != c:
        raise DimMismatch(f"attention projections expect {p.wq.shape[0]} channels, got {c}")
    if mode == "train" and rng is None and (p.attn_dropout > 0 or p.out_dropout > 0):
        raise ValueError("training with dropout needs an explicit rng")
    d_k = p.wq.shape[1]
    t = h * w
    seq = x.reshape([n, c, t]).transpose(0, 2, 1)  # [N, T, C]

    idx = np.empty((n, t), dtype=np.int64)
    for i in range(n):
        # lexicographic by feature vector; first feature is the primary key
        idx[i] = np.lexsort(seq.data[i].T[::-1])
    canon = _gather_positions(seq, idx)

    flat = canon.reshape([n * t, c])
    q = matmul(flat, p.wq).reshape([n, t, d_k])
    k = matmul(flat, p.wk).reshape([n, t, d_k])
    v = matmul(flat, p.wv).reshape([n, t, d_k])

    scores = bmm(q, k.transpose(0, 2, 1)) * p.scale
    attn = softmax_rows(scores.reshape([n * t, t])).reshape([n, t, t])
    attn_kept = dropout(attn, p.attn_dropout, mode, rng)
    mixed = bmm(attn_kept, v)
    projected = matmul(mixed.reshape([n * t, d_k]), p.wo)
    projected = dropout(projected, p.out_dropout, mode, rng).reshape([n, t, c])

    inverse = np.empty_like(idx)
    for i in range(n):
        inverse[i, idx[i]] = np.arange(t)
    restored = _gather_positions(projected, inverse)

    out = restored.transpose(0, 2, 1).reshape([n, c, h, w])
    if residual:
        out = x + out
    if return_attn:
        return out, attn.data.copy()
    return out


@dataclass(frozen=True)
class SpatialAttentionConfig:
    """d parallel dilated-convolution branches summed elementwise."""

    d: int = 2
    filters: int | None = None  # None: match the input channel count
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("branch count d must be >= 1")
        if len(self.dilations) != self.d:
            raise ValueError("need one dilation rate per branch")


@dataclass
class SpatialAttentionParams:
    branches: list[tuple[Conv2DParams, BatchNormParams]]

    @classmethod
    def create(cls, rng: np.random.Generator, in_ch: int,
               cfg: SpatialAttentionConfig) -> "SpatialAttentionParams":
        filters = in_ch if cfg.filters is None else cfg.filters
        branches = []
        for rate in cfg.dilations:
            conv = Conv2DParams.create(rng, in_ch, filters, cfg.kernel,
                                       padding="same", dilation=rate)
            branches.append((conv, BatchNormParams.create(filters)))
        return cls(branches)


def spatial_attention(x: Tensor, cfg: SpatialAttentionConfig,
                      params: SpatialAttentionParams, mode: Mode) -> Tensor:
    """Sum of d same-padded dilated convolutions, each batch-normalized."""
    if len(params.branches) != cfg.d:
        raise ValueError("parameter branch count does not match the config")
    out = None
    for conv_p, bn_p in params.branches:
        branch = batchnorm(conv2d(x, conv_p), bn_p, mode)
        out = branch if out is None else out + branch
    return out


@dataclass
class ResidualBlockParams:
    conv1: Conv2DParams
    bn1: BatchNormParams
    conv2: Conv2DParams
    bn2: BatchNormParams

    @classmethod
    def create(cls, rng: np.random.Generator, channels: int) -> "ResidualBlockParams":
        return cls(
            conv1=Conv2DParams.create(rng, channels, channels, 3),
            bn1=BatchNormParams.create(channels),
            conv2=Conv2DParams.create(rng, channels, channels, 3),
            bn2=BatchNormParams.create(channels),
        )


def residual_block(x: Tensor, params: ResidualBlockParams, mode: Mode) -> Tensor:
    """x + (conv3x3 -> BN -> relu -> conv3x3 -> BN), relu on the sum."""
    inner = batchnorm(conv2d(x, params.conv1), params.bn1, mode)
    inner = batchnorm(conv2d(relu(inner), params.conv2), params.bn2, mode)
    if inner.shape != x.shape:
        raise ShapeChange(f"residual path changed {x.shape} to {inner.shape}")
    return relu(x + inner)


@dataclass
class GranularParams:
    """Four same-padded convolutions at kernel sizes 1/3/5/7 feeding a
    residual block over their concatenation."""

    branches: list[Conv2DParams]
    residual: ResidualBlockParams
    kernel_sizes: tuple[int, ...] = (1, 3, 5, 7)

    @classmethod
    def create(cls, rng: np.random.Generator, in_ch: int,
               branch_filters: int) -> "GranularParams":
        kernels = (1, 3, 5, 7)
        branches = [Conv2DParams.create(rng, in_ch, branch_filters, k) for k in kernels]
        residual = ResidualBlockParams.create(rng, branch_filters * len(kernels))
        return cls(branches, residual, kernels)


def granular_feature_integration(x: Tensor, params: GranularParams, mode: Mode) -> Tensor:
    """Depth-concatenate the multi-scale branch outputs, then apply the
    residual mapping to the combined feature space."""
    if any(b.weights.shape[1] != x.shape[1] for b in params.branches):
        raise ChannelMismatch("granular branch kernels do not match the input channels")
    combined = None
    for branch in params.branches:
        y = conv2d(x, branch)
        combined = y if combined is None else concat_depth(combined, y)
    return residual_block(combined, params.residual, mode)
