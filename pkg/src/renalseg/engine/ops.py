"""Forward operations with exact reverse-mode gradients.

Shape convention is channels-first: activations are (C, D, H, W). There is
no batch axis; one volume is one sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Tensor, needs_grad


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_4d(x, name):
    if x.data.ndim != 4:
        raise ValueError(f"{name} must be (C, D, H, W), got {x.data.ndim} axes")


def _pad1(x):
    c, d, h, w = x.shape
    out = np.zeros((c, d + 2, h + 2, w + 2), dtype=x.dtype)
    out[:, 1:-1, 1:-1, 1:-1] = x
    return out


def conv3d(x, kernel, bias):
    """3x3x3 convolution, zero-padded by 1 so output keeps the spatial size.

    x: (C_in, D, H, W); kernel: (C_out, C_in, 3, 3, 3); bias: (C_out,).
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    _check_4d(x, "conv3d input")
    if kernel.data.ndim != 5 or kernel.data.shape[2:] != (3, 3, 3):
        raise ValueError(f"conv3d kernel must be (C_out, C_in, 3, 3, 3), got {kernel.data.shape}")
    if kernel.data.shape[1] != x.data.shape[0]:
        raise ValueError(
            f"conv3d channel mismatch: kernel expects C_in={kernel.data.shape[1]}, "
            f"input has {x.data.shape[0]} channels"
        )
    if bias.data.shape != (kernel.data.shape[0],):
        raise ValueError(f"conv3d bias must be (C_out,)={kernel.data.shape[0]}, got {bias.data.shape}")

    xp = _pad1(x.data)
    out = np.empty((kernel.data.shape[0],) + x.data.shape[1:], dtype=x.data.dtype)
    kernels.conv3x3_fwd(xp, kernel.data, bias.data, out)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            # Full correlation with the flipped, transposed kernel.
            kflip = np.ascontiguousarray(
                kernel.data.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1]
            )
            gx = np.empty_like(x.data)
            zero = np.zeros(x.data.shape[0], dtype=x.data.dtype)
            kernels.conv3x3_fwd(_pad1(g), kflip, zero, gx)
            x.accumulate_grad(gx)
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            kernels.conv3x3_grad_kernel(xp, g, gk)
            kernel.accumulate_grad(gk)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(1, 2, 3)))

    return Tensor(
        out,
        requires_grad=needs_grad(x, kernel, bias),
        _parents=(x, kernel, bias),
        _backward_fn=backward,
    )


def conv1x1(x, kernel, bias):
    """Per-voxel linear map across channels.

    x: (C_in, D, H, W); kernel: (C_out, C_in, 1, 1, 1); bias: (C_out,).
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    _check_4d(x, "conv1x1 input")
    if kernel.data.ndim != 5 or kernel.data.shape[2:] != (1, 1, 1):
        raise ValueError(f"conv1x1 kernel must be (C_out, C_in, 1, 1, 1), got {kernel.data.shape}")
    if kernel.data.shape[1] != x.data.shape[0]:
        raise ValueError(
            f"conv1x1 channel mismatch: kernel expects C_in={kernel.data.shape[1]}, "
            f"input has {x.data.shape[0]} channels"
        )

    c_in, d, h, w = x.data.shape
    c_out = kernel.data.shape[0]
    k2 = kernel.data.reshape(c_out, c_in)
    out = (k2 @ x.data.reshape(c_in, -1)) + bias.data[:, None]
    out = out.reshape(c_out, d, h, w)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        if x.requires_grad:
            x.accumulate_grad((k2.T @ g2).reshape(x.data.shape))
        if kernel.requires_grad:
            kernel.accumulate_grad((g2 @ x.data.reshape(c_in, -1).T).reshape(kernel.data.shape))
        if bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=1))

    return Tensor(
        out,
        requires_grad=needs_grad(x, kernel, bias),
        _parents=(x, kernel, bias),
        _backward_fn=backward,
    )


def conv_transpose3d(x, kernel, bias):
    """2x2x2 transposed convolution with stride 2: doubles every spatial axis.

    x: (C_in, D, H, W); kernel: (C_in, C_out, 2, 2, 2); bias: (C_out,).
    Each input voxel scatters into a disjoint 2x2x2 output block.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    _check_4d(x, "conv_transpose3d input")
    if kernel.data.ndim != 5 or kernel.data.shape[2:] != (2, 2, 2):
        raise ValueError(
            f"conv_transpose3d kernel must be (C_in, C_out, 2, 2, 2), got {kernel.data.shape}"
        )
    if kernel.data.shape[0] != x.data.shape[0]:
        raise ValueError(
            f"conv_transpose3d channel mismatch: kernel expects C_in={kernel.data.shape[0]}, "
            f"input has {x.data.shape[0]} channels"
        )

    c_in, d, h, w = x.data.shape
    c_out = kernel.data.shape[1]
    out = np.empty((c_out, 2 * d, 2 * h, 2 * w), dtype=x.data.dtype)
    kernels.tconv2x2_fwd(x.data, kernel.data, bias.data, out)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            gx = np.empty_like(x.data)
            zero = np.zeros(c_in, dtype=x.data.dtype)
            kernels.conv2x2s2_fwd(g, kernel.data, zero, gx)
            x.accumulate_grad(gx)
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            kernels.tconv2x2_grad_kernel(x.data, g, gk)
            kernel.accumulate_grad(gk)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(1, 2, 3)))

    return Tensor(
        out,
        requires_grad=needs_grad(x, kernel, bias),
        _parents=(x, kernel, bias),
        _backward_fn=backward,
    )


def maxpool3d(x):
    """2x2x2 max pooling with stride 2.

    Returns (pooled, argmax record); the record holds each block's winning
    in-block index (0..7, C-order) and routes the gradient. Ties go to the
    lowest linear index, which makes pooling deterministic.
    """
    x = _as_tensor(x)
    _check_4d(x, "maxpool3d input")
    c, d, h, w = x.data.shape
    for axis, n in (("D", d), ("H", h), ("W", w)):
        if n % 2 != 0:
            raise ValueError(f"maxpool3d requires even spatial dims; axis {axis} has size {n}")

    blocks = (
        x.data.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, d // 2, h // 2, w // 2, 8)
    )
    argmax = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, argmax[..., None].astype(np.intp), axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def backward(g):
        if x.requires_grad:
            gb = np.zeros((c, d // 2, h // 2, w // 2, 8), dtype=g.dtype)
            np.put_along_axis(gb, argmax[..., None].astype(np.intp), g[..., None], axis=-1)
            gx = (
                gb.reshape(c, d // 2, h // 2, w // 2, 2, 2, 2)
                .transpose(0, 1, 4, 2, 5, 3, 6)
                .reshape(c, d, h, w)
            )
            x.accumulate_grad(gx)

    pooled = Tensor(out, requires_grad=x.requires_grad, _parents=(x,), _backward_fn=backward)
    return pooled, argmax


def relu(x):
    """Elementwise max(0, x); the subgradient at 0 is 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return Tensor(out, requires_grad=x.requires_grad, _parents=(x,), _backward_fn=backward)


def dropout(x, rate, mode, rng):
    """Inverted dropout.

    Train mode zeroes each element with probability ``rate`` and scales
    survivors by 1/(1-rate); eval mode is the identity. The mask is drawn
    from ``rng`` and reused by the backward pass.
    """
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")

    keep = (rng.random(x.data.shape) >= rate)
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    mask = keep.astype(x.data.dtype) * scale
    out = x.data * mask

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return Tensor(out, requires_grad=x.requires_grad, _parents=(x,), _backward_fn=backward)


@dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer (one entry per channel)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def create(cls, channels, dtype=np.float32):
        return cls(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def astype(self, dtype):
        return BatchNormState(
            self.running_mean.astype(dtype),
            self.running_var.astype(dtype),
            self.momentum,
            self.eps,
        )


def batchnorm(x, gamma, beta, state, mode):
    """Channel-wise normalization over the spatial axes of one sample.

    Train mode normalizes with the current sample's statistics and updates
    the running mean/var with momentum; eval mode uses the running stats.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _check_4d(x, "batchnorm input")
    c = x.data.shape[0]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batchnorm gamma/beta must be ({c},)")
    dt = x.data.dtype

    if mode == "train":
        mean = x.data.mean(axis=(1, 2, 3))
        var = x.data.var(axis=(1, 2, 3))
        m = dt.type(state.momentum)
        state.running_mean = (m * state.running_mean.astype(dt) + (1 - m) * mean)
        state.running_var = (m * state.running_var.astype(dt) + (1 - m) * var)
    elif mode == "eval":
        mean = state.running_mean.astype(dt)
        var = state.running_var.astype(dt)
    else:
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + dt.type(state.eps))
    xhat = (x.data - mean[:, None, None, None]) * inv_std[:, None, None, None]
    out = gamma.data[:, None, None, None] * xhat + beta.data[:, None, None, None]

    n = x.data.shape[1] * x.data.shape[2] * x.data.shape[3]

    def backward(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(1, 2, 3)))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(1, 2, 3)))
        if x.requires_grad:
            gxhat = g * gamma.data[:, None, None, None]
            if mode == "train":
                s1 = gxhat.sum(axis=(1, 2, 3))[:, None, None, None]
                s2 = (gxhat * xhat).sum(axis=(1, 2, 3))[:, None, None, None]
                gx = (inv_std[:, None, None, None] / n) * (n * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std[:, None, None, None]
            x.accumulate_grad(gx)

    return Tensor(
        out,
        requires_grad=needs_grad(x, gamma, beta),
        _parents=(x, gamma, beta),
        _backward_fn=backward,
    )


def concat_channels(a, b):
    """Stack two activations along the channel axis (a first)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_4d(a, "concat_channels first input")
    if b.data.size and b.data.ndim != 4:
        raise ValueError(f"concat_channels second input must be (C, D, H, W), got {b.data.ndim} axes")
    if b.data.size and a.data.shape[1:] != b.data.shape[1:]:
        raise ValueError(
            f"concat_channels spatial mismatch: {a.data.shape[1:]} vs {b.data.shape[1:]}"
        )
    ca = a.data.shape[0]
    out = np.concatenate([a.data, b.data.reshape((-1,) + a.data.shape[1:])], axis=0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g[:ca])
        if b.requires_grad:
            b.accumulate_grad(g[ca:].reshape(b.data.shape))

    return Tensor(out, requires_grad=needs_grad(a, b), _parents=(a, b), _backward_fn=backward)


def softmax_channels(logits):
    """Per-voxel softmax across the channel axis, stabilized by max-subtraction."""
    logits = _as_tensor(logits)
    _check_4d(logits, "softmax_channels input")
    shifted = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        if logits.requires_grad:
            dot = (g * p).sum(axis=0, keepdims=True)
            logits.accumulate_grad(p * (g - dot))

    return Tensor(p, requires_grad=logits.requires_grad, _parents=(logits,), _backward_fn=backward)
