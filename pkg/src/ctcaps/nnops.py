"""Differentiable image-stack operations: convolution, pooling, batch norm,
dropout, residual addition, plus thin layer containers holding parameters.

Convolution is cross-correlation over NCHW tensors, computed through an
im2col/col2im pair so the heavy lifting lands in BLAS.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    apply_op,
    mul,
    reshape,
    sqrt,
    sub,
    tmean,
)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        i_max = i + stride * out_h
        for j in range(kw):
            j_max = j + stride * out_w
            cols[:, :, i, j] = xp[:, :, i:i_max:stride, j:j_max:stride]
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def _col2im(dcols: np.ndarray, xp_shape: tuple, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    n, c, _, _ = xp_shape
    dc = dcols.reshape(n, c, kh, kw, out_h, out_w)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        i_max = i + stride * out_h
        for j in range(kw):
            j_max = j + stride * out_w
            dxp[:, :, i:i_max:stride, j:j_max:stride] += dc[:, :, i, j]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with ``kernel`` [F,C,kh,kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(
            f"kernel {kernel.shape} larger than padded input {(n, c, hp, wp)}")
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    wm = kernel.data.reshape(f, c * kh * kw)
    out = np.tensordot(wm, cols, axes=([1], [1]))  # [F, N, L]
    out = np.ascontiguousarray(out.transpose(1, 0, 2)).reshape(n, f, out_h, out_w)

    def bwd(g):
        g2 = g.reshape(n, f, out_h * out_w)
        dk = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        dcols = np.tensordot(wm, g2, axes=([0], [1]))  # [CKK, N, L]
        dcols = dcols.transpose(1, 0, 2)
        dxp = _col2im(dcols, xp.shape, kh, kw, stride, out_h, out_w)
        if padding:
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        else:
            dx = dxp
        return dx, dk

    return apply_op("conv2d", out, (x, kernel), bwd)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Per-window maximum; gradient routes to the first maximum in each window."""
    if stride is None:
        stride = window
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(
            f"pool window {window} larger than spatial extents of {x.shape}")
    out_h = (h - window) // stride + 1
    out_w = (w - window) // stride + 1

    patches = np.empty((n, c, window, window, out_h, out_w), dtype=x.dtype)
    for i in range(window):
        i_max = i + stride * out_h
        for j in range(window):
            j_max = j + stride * out_w
            patches[:, :, i, j] = x.data[:, :, i:i_max:stride, j:j_max:stride]
    flat = patches.reshape(n, c, window * window, out_h, out_w)
    amax = flat.argmax(axis=2)  # first occurrence wins ties
    out = np.take_along_axis(flat, amax[:, :, None], axis=2)[:, :, 0]

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, amax[:, :, None], g[:, :, None], axis=2)
        dpatch = dflat.reshape(n, c, window, window, out_h, out_w)
        dx = np.zeros_like(x.data)
        for i in range(window):
            i_max = i + stride * out_h
            for j in range(window):
                j_max = j + stride * out_w
                dx[:, :, i:i_max:stride, j:j_max:stride] += dpatch[:, :, i, j]
        return (dx,)

    return apply_op("maxpool2d", out, (x,), bwd)


class BatchNormState:
    """Running statistics; populated on the first training batch."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self):
        self.running_mean: Optional[np.ndarray] = None
        self.running_var: Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train", momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Channel-wise normalization over an NCHW batch.

    Train mode normalizes by batch statistics (biased variance) and blends
    them into the running statistics; eval mode normalizes by the running
    statistics and fails if no training batch has been seen.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))
    if mode == "train":
        axes = (0, 2, 3)
        mu = tmean(x, axis=axes, keepdims=True)
        xc = sub(x, mu)
        var = tmean(mul(xc, xc), axis=axes, keepdims=True)
        inv = 1.0 / sqrt(var + eps)
        y = add(mul(mul(xc, inv), g4), b4)
        batch_mean = mu.data.reshape(c)
        batch_var = var.data.reshape(c)
        if state.initialized:
            state.running_mean = momentum * state.running_mean + (1 - momentum) * batch_mean
            state.running_var = momentum * state.running_var + (1 - momentum) * batch_var
        else:
            state.running_mean = batch_mean.copy()
            state.running_var = batch_var.copy()
        return y
    if not state.initialized:
        raise RuntimeError("uninitialized running statistics")
    rm = Tensor(state.running_mean.reshape(1, c, 1, 1).astype(x.dtype))
    rv = Tensor(state.running_var.reshape(1, c, 1, 1).astype(x.dtype))
    inv = 1.0 / sqrt(rv + eps)
    return add(mul(mul(sub(x, rm), inv), g4), b4)


def dropout(x: Tensor, rate: float, mode: str = "train",
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero elements with probability ``rate``, scaling survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout requires a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    factor = keep * (1.0 / (1.0 - rate))
    out = x.data * factor

    def bwd(g):
        return (g * factor,)

    return apply_op("dropout", out, (x,), bwd)


def residual_add(a: Tensor, b: Tensor, projection: Optional[Tensor] = None) -> Tensor:
    """Elementwise skip-connection sum; 1x1-projects ``b`` when channels differ."""
    if projection is not None:
        b = conv2d(b, projection, stride=1, padding=0)
    if a.shape != b.shape:
        raise DimensionError(f"residual_add shape mismatch: {a.shape} vs {b.shape}")
    return add(a, b)


# ---------------------------------------------------------------------------
# Parameter-holding layers


class Conv2dLayer:
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, rng: Optional[np.random.Generator] = None,
                 dtype=None, name: str = "conv"):
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in)
        k = rng.normal(0.0, std, size=(out_channels, in_channels, kernel_size, kernel_size))
        self.kernel = Tensor(k, requires_grad=True, dtype=dtype, name=f"{name}.kernel")
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True, dtype=dtype,
                           name=f"{name}.bias")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.kernel, stride=self.stride, padding=self.padding)
        return add(y, reshape(self.bias, (1, self.bias.shape[0], 1, 1)))

    def parameters(self):
        return [self.kernel, self.bias]


class BatchNorm2dLayer:
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=None, name: str = "bn"):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype,
                            name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype,
                           name=f"{name}.beta")
        self.state = BatchNormState()
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, mode=mode,
                          momentum=self.momentum, eps=self.eps)

    def parameters(self):
        return [self.gamma, self.beta]
