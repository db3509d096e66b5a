"""Differentiable layer primitives built directly on numpy.

Convolution uses an explicit patch gather followed by one GEMM; its backward
pass scatters the column gradient back with one strided add per kernel offset.
"""

from __future__ import annotations

import math

import numpy as np

from ..tensor import ShapeError, Tensor, _make, mul


# ----------------------------------------------------------------- padding
def same_padding(size: int, kernel: int, stride: int) -> tuple:
    """(before, after, out_size) for "same" padding: out = ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2, out


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return same_padding(size, kernel, stride)[2]
    if padding == "valid":
        return (size - kernel) // stride + 1
    raise ValueError(f"unknown padding {padding!r}; expected 'same' or 'valid'")


# ---------------------------------------------------------------- convolve
def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * ho * wo)


def _col2im(dcols: np.ndarray, padded_shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = padded_shape[:2]
    dcols = dcols.reshape(c, kh, kw, b, ho, wo)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                dcols[:, i, j].transpose(1, 0, 2, 3)
            )
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of ``x`` (B,C,H,W) with ``weight`` (O,C,kh,kw)."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects input of shape (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    o, c_w, kh, kw = weight.shape
    if c != c_w:
        raise ShapeError(f"conv2d channel mismatch: input has {c} channels, weight expects {c_w}")
    if stride < 1:
        raise ValueError("stride must be positive")
    if padding == "same":
        top, bottom, ho = same_padding(h, kh, stride)
        left, right, wo = same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w} under valid padding")
        top = bottom = left = right = 0
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    else:
        raise ValueError(f"unknown padding {padding!r}; expected 'same' or 'valid'")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (top, bottom), (left, right))) if (top or bottom or left or right) else xd
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = weight.data.reshape(o, -1)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, b, ho, wo).transpose(1, 0, 2, 3))
    padded_shape = xp.shape

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        gx = None
        if x.requires_grad:
            dxp = _col2im(wm.T @ g2, padded_shape, kh, kw, stride, ho, wo)
            gx = dxp[:, :, top:top + h, left:left + w]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    """Max over k x k windows (no padding).

    Backward routes each output gradient to the first maximal element of its
    window in row-major order.
    """
    stride = stride or k
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects (B,C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"pool window {k}x{k} exceeds input {h}x{w}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    xd = x.data
    windows = np.empty((b, c, ho, wo, k * k), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            windows[..., i * k + j] = xd[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (idx == i * k + j)
        return (gx,)

    return _make(out, (x,), backward, "maxpool2d")


def _adaptive_bounds(size: int, out: int) -> list:
    return [(math.floor(i * size / out), math.ceil((i + 1) * size / out)) for i in range(out)]


def adaptive_avg_pool2d(x: Tensor, output_size: tuple) -> Tensor:
    """Average pool to a fixed spatial size (windows may overlap when sizes do not divide)."""
    b, c, h, w = x.shape
    oh, ow = output_size
    if (oh, ow) == (h, w):
        return x
    rows, cols = _adaptive_bounds(h, oh), _adaptive_bounds(w, ow)
    xd = x.data
    out = np.empty((b, c, oh, ow), dtype=xd.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = xd[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += g[:, :, i:i + 1, j:j + 1] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return _make(out, (x,), backward, "adaptive_avg_pool2d")


def global_avg_pool2d(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


# ------------------------------------------------------------- activations
def relu(x: Tensor) -> Tensor:
    return x.relu()


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return _make(out, (x,), backward, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """exp(x_i) / sum_j exp(x_j) along ``axis``, computed after subtracting the max."""
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the optional affine scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = xd.shape[-1]
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    def backward(g):
        gg = g * gamma.data if gamma is not None else g
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).sum(axis=-1, keepdims=True) / n)
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, n).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, n).sum(axis=0))
        return tuple(grads)

    parents = tuple(p for p in (x, gamma, beta) if p is not None)
    return _make(out, parents, backward, "layer_norm")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a seeded numpy Generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return mul(x, Tensor(mask, dtype=x.dtype))
