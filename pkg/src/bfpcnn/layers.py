"""Differentiable layer primitives: convolution (plain, depthwise/separable,
dilated), max pooling, batch normalization, relu, dense, flatten, depth
concatenation, dropout and softmax.

Convolutions are cross-correlations (no kernel flip). Spatial kernels run
through im2col: the input is unfolded into per-window columns once, the
forward pass is a single matrix product, and the backward pass scatters
column gradients back with the transposed unfolding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import (
    BatchTooSmall,
    ChannelMismatch,
    DimMismatch,
    KernelTooLarge,
    SpatialMismatch,
)
from .tensor import Tensor, apply_op

Mode = Literal["train", "infer"]
Padding = Literal["valid", "same"]


@dataclass
class Conv2DParams:
    """Weights [out_ch, in_ch, kh, kw], bias [out_ch], stride, padding mode
    and optional dilation rate."""

    weights: Tensor
    bias: Tensor
    stride: int = 1
    padding: Padding = "same"
    dilation: int = 1

    def __post_init__(self):
        if self.weights.data.ndim != 4:
            raise DimMismatch(f"conv weights must be rank 4, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimMismatch("bias length must equal the output channel count")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if min(self.weights.shape[2:]) < 1:
            raise ValueError("kernel dims must be >= 1")

    @classmethod
    def create(cls, rng: np.random.Generator, in_ch: int, out_ch: int, kernel: int,
               stride: int = 1, padding: Padding = "same", dilation: int = 1) -> "Conv2DParams":
        w = he_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel)
        return cls(w, Tensor([out_ch], 0.0, requires_grad=True), stride, padding, dilation)


@dataclass
class BatchNormParams:
    """Per-channel scale/shift plus running statistics."""

    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: Tensor = None
    running_var: Tensor = None

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        ch = self.gamma.shape[0]
        if self.running_mean is None:
            self.running_mean = Tensor([ch], 0.0)
        if self.running_var is None:
            self.running_var = Tensor([ch], 1.0)

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormParams":
        return cls(Tensor([channels], 1.0, requires_grad=True),
                   Tensor([channels], 0.0, requires_grad=True), eps, momentum)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Kaiming-uniform init, drawn directly in float32 for determinism.

    Built in place: the default head weight is large enough that an extra
    copy would double peak memory.
    """
    bound = np.float32(np.sqrt(6.0 / fan_in))
    n = int(np.prod(shape))
    vals = rng.random(n, dtype=np.float32)
    vals -= np.float32(0.5)
    vals *= np.float32(2.0) * bound
    t = Tensor._wrap(vals.reshape(shape))
    t.requires_grad = True
    return t


# -- im2col plumbing ----------------------------------------------------------

def _axis_geometry(size: int, kernel: int, stride: int, dilation: int,
                   padding: Padding) -> tuple[int, int, int]:
    """(pad_before, pad_after, out_size) for one spatial axis."""
    eff = (kernel - 1) * dilation + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + eff - size, 0)
        before = total // 2  # extra padding goes after (bottom/right)
        return before, total - before, out
    if eff > size:
        raise KernelTooLarge(f"kernel extent {eff} exceeds input size {size}")
    return 0, 0, (size - eff) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            padding: Padding, fill: float = 0.0):
    n, c, h, w = x.shape
    pt, pb, oh = _axis_geometry(h, kh, stride, dilation, padding)
    pl, pr, ow = _axis_geometry(w, kw, stride, dilation, padding)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                   constant_values=np.float32(fill))
    col = np.empty((n, c, kh, kw, oh, ow), dtype=np.float32)
    for i in range(kh):
        i0 = i * dilation
        for j in range(kw):
            j0 = j * dilation
            col[:, :, i, j] = x[:, :, i0:i0 + stride * oh:stride,
                                j0:j0 + stride * ow:stride]
    return col, (pt, pl, oh, ow)


def _col2im(dcol: np.ndarray, in_shape, stride: int, dilation: int, pads) -> np.ndarray:
    n, c, h, w = in_shape
    pt, pl, oh, ow = pads
    kh, kw = dcol.shape[2], dcol.shape[3]
    eff_h = (kh - 1) * dilation + 1
    eff_w = (kw - 1) * dilation + 1
    ph = max(h + pt, (oh - 1) * stride + eff_h)
    pw = max(w + pl, (ow - 1) * stride + eff_w)
    dx = np.zeros((n, c, ph, pw), dtype=np.float32)
    for i in range(kh):
        i0 = i * dilation
        for j in range(kw):
            j0 = j * dilation
            dx[:, :, i0:i0 + stride * oh:stride,
               j0:j0 + stride * ow:stride] += dcol[:, :, i, j]
    return dx[:, :, pt:pt + h, pl:pl + w]


# -- layers -------------------------------------------------------------------

def conv2d(x: Tensor, p: Conv2DParams) -> Tensor:
    """Cross-correlation with bias: out[f, i, j] = sum_m,n x[c, i+m, j+n] * w[f, c, m, n] + b[f]."""
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = p.weights.shape
    if c != in_ch:
        raise ChannelMismatch(f"conv2d: input has {c} channels, weights expect {in_ch}")
    col, pads = _im2col(x.data, kh, kw, p.stride, p.dilation, p.padding)
    oh, ow = pads[2], pads[3]
    cols = col.reshape(n, in_ch * kh * kw, oh * ow)
    w2 = p.weights.data.reshape(out_ch, -1)
    out = np.matmul(w2, cols) + p.bias.data.reshape(1, out_ch, 1)
    weights, bias = p.weights, p.bias
    stride, dilation = p.stride, p.dilation
    x_shape = x.shape

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(n, out_ch, oh * ow)
        if bias.requires_grad:
            bias.grad += g2.sum(axis=(0, 2))
        if weights.requires_grad:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            weights.grad += dw.reshape(weights.shape)
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            x.grad += _col2im(dcols.reshape(n, in_ch, kh, kw, oh, ow),
                              x_shape, stride, dilation, pads)

    return apply_op("conv2d", (x, weights, bias), out.reshape(n, out_ch, oh, ow), backward)


def _depthwise_conv2d(x: Tensor, depthwise: Tensor) -> Tensor:
    """Per-channel 3x3-style convolution, same padding, stride 1."""
    n, c, h, w = x.shape
    kh, kw = depthwise.shape[2], depthwise.shape[3]
    col, pads = _im2col(x.data, kh, kw, 1, 1, "same")
    dw = depthwise.data.reshape(c, kh, kw)
    out = np.einsum("ncijhw,cij->nchw", col, dw, optimize=True)
    x_shape = x.shape

    def backward(g: np.ndarray) -> None:
        if depthwise.requires_grad:
            grad_w = np.einsum("ncijhw,nchw->cij", col, g, optimize=True)
            depthwise.grad += grad_w.reshape(depthwise.shape)
        if x.requires_grad:
            dcol = np.einsum("cij,nchw->ncijhw", dw, g, optimize=True)
            x.grad += _col2im(dcol, x_shape, 1, 1, pads)

    return apply_op("depthwise_conv2d", (x, depthwise), out, backward)


def separable_conv2d(x: Tensor, depthwise: Tensor, pointwise: Tensor,
                     bias: Tensor) -> Tensor:
    """Depthwise convolution per channel followed by a 1x1 pointwise mix."""
    c = x.shape[1]
    if depthwise.shape[0] != c or depthwise.shape[1] != 1:
        raise ChannelMismatch(
            f"depthwise kernel {depthwise.shape} does not match {c} input channels")
    if pointwise.shape[1] != c or pointwise.shape[2:] != (1, 1):
        raise ChannelMismatch(
            f"pointwise kernel {pointwise.shape} does not match {c} input channels")
    mixed = _depthwise_conv2d(x, depthwise)
    return conv2d(mixed, Conv2DParams(pointwise, bias, stride=1, padding="same"))


def maxpool2d(x: Tensor, k: int, stride: int, padding: Padding = "valid") -> Tensor:
    """Max over k x k windows; the gradient routes to the first (row-major)
    maximal element of each window."""
    n, c, h, w = x.shape
    if k < 1 or stride < 1:
        raise ValueError("k and stride must be >= 1")
    if k > h or k > w:
        raise KernelTooLarge(f"pool window {k} exceeds input {h}x{w}")
    # -inf padding keeps padded cells out of every max
    col, pads = _im2col(x.data, k, k, stride, 1, padding, fill=-np.inf)
    oh, ow = pads[2], pads[3]
    flat = col.reshape(n, c, k * k, oh, ow)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2).squeeze(2)
    x_shape = x.shape

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            dcol = np.zeros_like(flat)
            np.put_along_axis(dcol, arg[:, :, None], g[:, :, None], axis=2)
            x.grad += _col2im(dcol.reshape(n, c, k, k, oh, ow), x_shape, stride, 1, pads)

    return apply_op("maxpool2d", (x,), out, backward)


def batchnorm(x: Tensor, p: BatchNormParams, mode: Mode) -> Tensor:
    """Per-channel normalization: scale gamma, shift beta.

    Train mode normalizes by biased batch statistics and updates the running
    buffers in place; infer mode uses the running statistics.
    """
    n, c, h, w = x.shape
    if p.gamma.shape != (c,):
        raise ChannelMismatch(f"batchnorm: {c} channels vs parameters {p.gamma.shape}")
    gamma, beta = p.gamma, p.beta
    g4 = gamma.data.reshape(1, c, 1, 1)
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise BatchTooSmall("train-mode batchnorm needs >= 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        inv = 1.0 / np.sqrt(var + np.float32(p.eps))
        centered = x.data - mu.reshape(1, c, 1, 1)
        xhat = centered * inv.reshape(1, c, 1, 1)
        out = g4 * xhat + beta.data.reshape(1, c, 1, 1)
        mom = np.float32(p.momentum)
        p.running_mean.data[:] = (1 - mom) * p.running_mean.data + mom * mu
        p.running_var.data[:] = (1 - mom) * p.running_var.data + mom * var

        def backward(g: np.ndarray) -> None:
            if beta.requires_grad:
                beta.grad += g.sum(axis=(0, 2, 3))
            if gamma.requires_grad:
                gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
            if x.requires_grad:
                dxhat = g * g4
                inv4 = inv.reshape(1, c, 1, 1)
                dvar = (dxhat * centered).sum(axis=(0, 2, 3)) * (-0.5) * inv ** 3
                dmu = -(dxhat.sum(axis=(0, 2, 3)) * inv) \
                    - dvar * 2.0 / m * centered.sum(axis=(0, 2, 3))
                x.grad += (dxhat * inv4
                           + dvar.reshape(1, c, 1, 1) * 2.0 / m * centered
                           + dmu.reshape(1, c, 1, 1) / m)

        return apply_op("batchnorm", (x, gamma, beta), out, backward)

    inv = 1.0 / np.sqrt(p.running_var.data + np.float32(p.eps))
    xhat = (x.data - p.running_mean.data.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g: np.ndarray) -> None:
        if beta.requires_grad:
            beta.grad += g.sum(axis=(0, 2, 3))
        if gamma.requires_grad:
            gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
        if x.requires_grad:
            x.grad += g * g4 * inv.reshape(1, c, 1, 1)

    return apply_op("batchnorm", (x, gamma, beta), out, backward)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); gradient is 0 at x == 0."""
    mask = x.data > 0

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * mask

    return apply_op("relu", (x,), np.where(mask, x.data, np.float32(0)), backward)


def concat_depth(x: Tensor, y: Tensor) -> Tensor:
    """Stack two feature maps along the channel axis."""
    if x.data.ndim != 4 or y.data.ndim != 4:
        raise SpatialMismatch("concat_depth expects rank-4 tensors")
    if x.shape[0] != y.shape[0] or x.shape[2:] != y.shape[2:]:
        raise SpatialMismatch(f"concat_depth: {x.shape} vs {y.shape}")
    cx = x.shape[1]

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g[:, :cx]
        if y.requires_grad:
            y.grad += g[:, cx:]

    return apply_op("concat_depth", (x, y),
                    np.concatenate([x.data, y.data], axis=1), backward)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: x @ w + b for x [N, D], w [D, U], b [U]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimMismatch(f"dense expects rank-2 input and weights, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimMismatch(f"dense: {x.shape} @ {w.shape} + {b.shape}")
    out = x.data @ w.data + b.data
    x_data, w_data = x.data, w.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g @ w_data.T
        if w.requires_grad:
            w.grad += x_data.T @ g
        if b.requires_grad:
            b.grad += g.sum(axis=0)

    return apply_op("dense", (x, w, b), out, backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the batch dimension, row-major."""
    n = x.shape[0]
    return x.reshape([n, x.size // n])


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax, max-shifted for stability; rows sum to 1."""
    if logits.data.ndim != 2:
        raise DimMismatch(f"softmax expects [N, K], got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if logits.requires_grad:
            logits.grad += out * (g - (g * out).sum(axis=1, keepdims=True))

    return apply_op("softmax", (logits,), out, backward)


def dropout(x: Tensor, rate: float, mode: Mode, seed) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and scale survivors
    by 1/(1-rate) in train mode; identity at inference.

    ``seed`` is an int or a numpy Generator; an int gives a fixed mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x
    if isinstance(seed, np.random.Generator):
        rng = seed
    elif isinstance(seed, (int, np.integer)):
        rng = np.random.default_rng(int(seed))
    else:
        raise TypeError("dropout needs an int seed or a numpy Generator")
    scale = np.float32(1.0 / (1.0 - rate))
    mask = (rng.random(x.shape, dtype=np.float32) >= rate) * scale

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.grad += g * mask

    return apply_op("dropout", (x,), x.data * mask, backward)
