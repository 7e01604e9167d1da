"""NCHW tensor kernels with hand-paired forward/backward passes.

Every backward function is the exact analytic gradient of its forward
partner. Kernels accept float32 (the production dtype) or float64 (used by
the finite-difference verification paths) and never mutate their inputs,
with one exception: batchnorm_forward in train mode updates the running
statistics stored in its parameter struct.

Convolution is implemented as patch-matrix expansion followed by a matrix
multiply; its semantics are defined by the plain nested-loop convolution it
must reproduce.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """A tensor shape violates a kernel contract."""


class NumericError(ArithmeticError):
    """A kernel or training step produced non-finite values."""


FLOAT_DTYPES = (np.float32, np.float64)

# When enabled, every kernel asserts its outputs are finite. Off by default
# to keep production forward passes cheap; the test suite switches it on.
CHECK_FINITE = os.environ.get("SSDR_CHECK_FINITE", "0") == "1"


def _assert_finite(op: str, *arrays: np.ndarray) -> None:
    if not CHECK_FINITE:
        return
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NumericError(f"{op}: non-finite values in result")


def _require_rank4(op: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected rank-4 NCHW input, got shape {x.shape}")
    if x.dtype.type not in FLOAT_DTYPES:
        raise ShapeError(f"{op}: expected float32/float64 input, got {x.dtype}")


@dataclass
class ConvParams:
    """Convolution weights [C_out, C_in, K_h, K_w], bias [C_out], stride, symmetric zero padding."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv bias must have shape ({self.weight.shape[0]},), got {self.bias.shape}"
            )
        if self.stride < 1:
            raise ValueError(f"conv stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"conv padding must be non-negative, got {self.padding}")


@dataclass
class BatchNormParams:
    """Per-channel affine parameters and running statistics for batch normalization."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self) -> None:
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise ShapeError("batchnorm parameter vectors must share one length")
        if self.eps <= 0:
            raise ValueError(f"batchnorm eps must be positive, got {self.eps}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"batchnorm momentum must lie in (0,1), got {self.momentum}")


@dataclass
class PoolCache:
    """Flat input index of the selected maximum for each pooled output element."""

    indices: np.ndarray  # int64, same shape as the pooled output
    input_shape: tuple


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    # xp: one padded image [C, Hp, Wp] -> [C*kh*kw, out_h*out_w]
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    return cols.reshape(c * kh * kw, out_h * out_w)


def _col2im_add(gcols: np.ndarray, gxp: np.ndarray, kh: int, kw: int, stride: int,
                out_h: int, out_w: int) -> None:
    g = gcols.reshape(-1, kh, kw, out_h, out_w)
    for i in range(kh):
        for j in range(kw):
            gxp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += g[:, i, j]


def _conv_out_shape(x: np.ndarray, p: ConvParams) -> tuple:
    n, c_in, h, w = x.shape
    c_out, w_c_in, kh, kw = p.weight.shape
    if c_in != w_c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, weight expects {w_c_in}")
    out_h = (h + 2 * p.padding - kh) // p.stride + 1
    out_w = (w + 2 * p.padding - kw) // p.stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} with padding {p.padding} does not fit input {h}x{w}"
        )
    return n, c_out, out_h, out_w


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """out[n,o,y,x] = bias[o] + sum_{c,i,j} weight[o,c,i,j] * x_padded[n,c,y*s+i,x*s+j]."""
    _require_rank4("conv2d_forward", x)
    n, c_out, out_h, out_w = _conv_out_shape(x, p)
    kh, kw = p.weight.shape[2], p.weight.shape[3]
    pad = p.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    w2 = p.weight.reshape(c_out, -1).astype(x.dtype, copy=False)
    bias = p.bias.astype(x.dtype, copy=False)[:, None]
    out = np.empty((n, c_out, out_h, out_w), dtype=x.dtype)
    for i in range(n):
        cols = _im2col(xp[i], kh, kw, p.stride, out_h, out_w)
        out[i] = (w2 @ cols + bias).reshape(c_out, out_h, out_w)
    _assert_finite("conv2d_forward", out)
    return out


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray,
                    need_grad_x: bool = True):
    """Exact gradients of conv2d_forward: returns (grad_x, grad_weight, grad_bias)."""
    _require_rank4("conv2d_backward", x)
    expected = _conv_out_shape(x, p)
    if grad_out.shape != expected:
        raise ShapeError(
            f"conv2d_backward: grad_out shape {grad_out.shape} does not match output {expected}"
        )
    n, c_out, out_h, out_w = expected
    _, _, h, w = x.shape
    kh, kw = p.weight.shape[2], p.weight.shape[3]
    pad = p.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x

    w2 = p.weight.reshape(c_out, -1).astype(x.dtype, copy=False)
    grad_w2 = np.zeros((c_out, w2.shape[1]), dtype=x.dtype)
    grad_b = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(p.bias.dtype)
    grad_xp = np.zeros_like(xp) if need_grad_x else None
    for i in range(n):
        cols = _im2col(xp[i], kh, kw, p.stride, out_h, out_w)
        g = grad_out[i].reshape(c_out, -1)
        grad_w2 += g @ cols.T
        if need_grad_x:
            _col2im_add(w2.T @ g, grad_xp[i], kh, kw, p.stride, out_h, out_w)
    grad_w = grad_w2.reshape(p.weight.shape).astype(p.weight.dtype, copy=False)
    grad_x = None
    if need_grad_x:
        grad_x = grad_xp[:, :, pad : pad + h, pad : pad + w] if pad else grad_xp
    _assert_finite("conv2d_backward", grad_x, grad_w, grad_b)
    return grad_x, grad_w, grad_b


def maxpool2d_forward(x: np.ndarray, window: int = 2, stride: int = 2):
    """Non-overlapping max pooling; ties broken by the lowest flat input index."""
    _require_rank4("maxpool2d_forward", x)
    if window != stride:
        raise ShapeError(f"maxpool2d: only window == stride supported, got {window}/{stride}")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ShapeError(f"maxpool2d: extents {h}x{w} not divisible by window {window}")
    oh, ow = h // window, w // window
    win = x.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(n, c, oh, ow, window * window)
    # argmax picks the first maximum; within-window row-major order equals
    # ascending flat input index, which fixes the tie-break.
    local = win.argmax(axis=-1)
    out = np.ascontiguousarray(np.take_along_axis(win, local[..., None], axis=-1)[..., 0])
    dy, dx = local // window, local % window
    row = np.arange(oh)[None, None, :, None] * window + dy
    col = np.arange(ow)[None, None, None, :] * window + dx
    base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * h
    flat = ((base + row) * w + col).astype(np.int64)
    _assert_finite("maxpool2d_forward", out)
    return out, PoolCache(flat, x.shape)


def maxpool2d_backward(grad_out: np.ndarray, cache: PoolCache, input_shape: tuple) -> np.ndarray:
    """Routes each output gradient to its cached argmax position."""
    if tuple(input_shape) != tuple(cache.input_shape):
        raise ShapeError(
            f"maxpool2d_backward: input shape {tuple(input_shape)} does not match "
            f"cached {tuple(cache.input_shape)}"
        )
    if grad_out.shape != cache.indices.shape:
        raise ShapeError(
            f"maxpool2d_backward: grad_out shape {grad_out.shape} does not match "
            f"cache {cache.indices.shape}"
        )
    flat = np.zeros(int(np.prod(input_shape)), dtype=grad_out.dtype)
    np.add.at(flat, cache.indices.ravel(), grad_out.ravel())
    grad_x = flat.reshape(input_shape)
    _assert_finite("maxpool2d_backward", grad_x)
    return grad_x


def relu_forward(x: np.ndarray) -> np.ndarray:
    out = np.maximum(x, 0)
    _assert_finite("relu_forward", out)
    return out


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Subgradient 0 at x == 0."""
    if grad_out.shape != x.shape:
        raise ShapeError(f"relu_backward: shapes {x.shape} vs {grad_out.shape}")
    grad_x = grad_out * (x > 0)
    _assert_finite("relu_backward", grad_x)
    return grad_x


def _batch_stats(x: np.ndarray):
    # Population (biased) statistics over N, H, W; accumulated in float64.
    mu = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = np.square(x - mu[None, :, None, None]).mean(axis=(0, 2, 3), dtype=np.float64)
    return mu, var


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, mode: str) -> np.ndarray:
    """Normalizes per channel; train mode uses batch statistics and updates running stats."""
    _require_rank4("batchnorm_forward", x)
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    c = x.shape[1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"batchnorm: input has {c} channels, parameters have {p.gamma.shape[0]}")
    if mode == "train":
        mu64, var64 = _batch_stats(x)
        p.running_mean[:] = ((1.0 - p.momentum) * p.running_mean
                             + p.momentum * mu64.astype(p.running_mean.dtype))
        p.running_var[:] = ((1.0 - p.momentum) * p.running_var
                            + p.momentum * var64.astype(p.running_var.dtype))
        mean = mu64.astype(x.dtype)
        var = var64.astype(x.dtype)
    else:
        mean = p.running_mean.astype(x.dtype, copy=False)
        var = p.running_var.astype(x.dtype, copy=False)
    inv = 1.0 / np.sqrt(var + x.dtype.type(p.eps))
    gamma = p.gamma.astype(x.dtype, copy=False)
    beta = p.beta.astype(x.dtype, copy=False)
    y = (gamma * inv)[None, :, None, None] * (x - mean[None, :, None, None]) \
        + beta[None, :, None, None]
    _assert_finite("batchnorm_forward", y)
    return y


def batchnorm_backward(x: np.ndarray, p: BatchNormParams, grad_out: np.ndarray):
    """Gradients through batch statistics; returns (grad_x, grad_gamma, grad_beta)."""
    _require_rank4("batchnorm_backward", x)
    if grad_out.shape != x.shape:
        raise ShapeError(f"batchnorm_backward: shapes {x.shape} vs {grad_out.shape}")
    c = x.shape[1]
    if p.gamma.shape != (c,):
        raise ShapeError(f"batchnorm: input has {c} channels, parameters have {p.gamma.shape[0]}")
    mu64, var64 = _batch_stats(x)
    inv = (1.0 / np.sqrt(var64 + p.eps)).astype(x.dtype)
    xhat = (x - mu64.astype(x.dtype)[None, :, None, None]) * inv[None, :, None, None]
    m = x.shape[0] * x.shape[2] * x.shape[3]
    sg = grad_out.sum(axis=(0, 2, 3), dtype=np.float64)
    sgx = (grad_out * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    grad_beta = sg.astype(p.beta.dtype)
    grad_gamma = sgx.astype(p.gamma.dtype)
    gamma = p.gamma.astype(x.dtype, copy=False)
    coef = (gamma * inv / x.dtype.type(m))[None, :, None, None]
    grad_x = coef * (m * grad_out
                     - sg.astype(x.dtype)[None, :, None, None]
                     - xhat * sgx.astype(x.dtype)[None, :, None, None])
    _assert_finite("batchnorm_backward", grad_x, grad_gamma, grad_beta)
    return grad_x, grad_gamma, grad_beta


def dropout_forward(x: np.ndarray, keep_prob: float, mode: str, rng=None):
    """Inverted dropout: kept elements are scaled by 1/keep_prob; eval is the identity."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        return x, np.ones_like(x)
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype)
    out = x * mask / x.dtype.type(keep_prob)
    _assert_finite("dropout_forward", out)
    return out, mask


def dropout_backward(mask: np.ndarray, keep_prob: float, grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape != mask.shape:
        raise ShapeError(f"dropout_backward: shapes {mask.shape} vs {grad_out.shape}")
    grad_x = grad_out * mask / grad_out.dtype.type(keep_prob)
    _assert_finite("dropout_backward", grad_x)
    return grad_x


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    """[N,C,H,W] -> [N,C] spatial mean per channel."""
    _require_rank4("global_avg_pool_forward", x)
    out = x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)
    _assert_finite("global_avg_pool_forward", out)
    return out


def global_avg_pool_backward(grad_out: np.ndarray, h: int, w: int) -> np.ndarray:
    if grad_out.ndim != 2:
        raise ShapeError(f"global_avg_pool_backward: expected [N,C], got {grad_out.shape}")
    n, c = grad_out.shape
    scale = grad_out / grad_out.dtype.type(h * w)
    grad_x = np.broadcast_to(scale[:, :, None, None], (n, c, h, w)).copy()
    _assert_finite("global_avg_pool_backward", grad_x)
    return grad_x


def softmax_cross_entropy(logits: np.ndarray, labels):
    """Mean cross-entropy over the batch; returns (loss, probs, grad_logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected [N,K] logits, got {logits.shape}")
    y = np.asarray(labels)
    n, k = logits.shape
    if y.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: {n} rows but {y.shape} labels")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    shifted = (logits - logits.max(axis=1, keepdims=True)).astype(np.float64)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    probs64 = e / z
    loss = float(np.mean(np.log(z[:, 0]) - shifted[np.arange(n), y]))
    grad64 = probs64.copy()
    grad64[np.arange(n), y] -= 1.0
    grad = (grad64 / n).astype(logits.dtype)
    probs = probs64.astype(logits.dtype)
    _assert_finite("softmax_cross_entropy", probs, grad)
    if CHECK_FINITE and not np.isfinite(loss):
        raise NumericError("softmax_cross_entropy: non-finite loss")
    return loss, probs, grad
