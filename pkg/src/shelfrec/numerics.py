"""Dense array kernels with hand-written backward passes.

Images and feature maps are channels-last arrays, either ``(H, W, C)`` or
batched ``(N, H, W, C)``.  Every forward op returns ``(output, cache)`` and the
matching ``*_backward`` consumes that cache.  Ops preserve the floating dtype
of their input; reductions (norms) accumulate in float64.
"""
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateInputError, DimensionError, StateError


@dataclass(frozen=True)
class Cache:
    op: str
    data: Any


def _check_cache(cache, op):
    if not isinstance(cache, Cache):
        raise StateError(f"{op} backward needs the cache from {op} forward, got {type(cache).__name__}")
    if cache.op != op:
        raise StateError(f"{op} backward received a cache produced by {cache.op}")
    return cache.data


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected HxWxC or NxHxWxC array, got shape {x.shape}")


def _pair(k):
    if isinstance(k, (tuple, list)):
        if len(k) != 2:
            raise DimensionError(f"kernel must be an int or a pair, got {k!r}")
        return int(k[0]), int(k[1])
    return int(k), int(k)


def conv_output_size(size, kernel, stride):
    return (size - kernel) // stride + 1


def conv2d(x, kernels, stride=1, bias=None):
    """Valid (unpadded) cross-correlation.

    ``kernels`` has shape ``(Kh, Kw, C, F)``; the output is
    ``(Ho, Wo, F)`` with ``Ho = (H - Kh) // stride + 1``.
    """
    xb, squeeze = _batched(x)
    kernels = np.asarray(kernels)
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be KhxKwxCxF, got shape {kernels.shape}")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    n, h, w, c = xb.shape
    kh, kw, kc, f = kernels.shape
    if kc != c:
        raise DimensionError(f"input has {c} channels but kernels expect {kc}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if bias is not None and np.shape(bias) != (f,):
        raise DimensionError(f"bias must have shape ({f},), got {np.shape(bias)}")

    # (N, Ho, Wo, C, Kh, Kw) -> rows ordered (Kh, Kw, C) to match the kernel layout
    win = sliding_window_view(xb, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    out = cols @ kernels.reshape(kh * kw * c, f)
    if bias is not None:
        out = out + bias
    out = out.reshape(n, ho, wo, f).astype(xb.dtype, copy=False)
    cache = Cache("conv2d", (xb.shape, cols, kernels, stride, squeeze, bias is not None))
    return (out[0] if squeeze else out), cache


def conv2d_backward(grad_out, cache, input_grad=True):
    """Returns ``(grad_input, grad_kernels, grad_bias)``.

    ``grad_bias`` is None when the forward call had no bias, and ``grad_input``
    is None when ``input_grad`` is False (first layer of a network).
    """
    in_shape, cols, kernels, stride, squeeze, has_bias = _check_cache(cache, "conv2d")
    n, h, w, c = in_shape
    kh, kw, _, f = kernels.shape
    g = np.asarray(grad_out)
    if squeeze:
        g = g[None]
    ho, wo = g.shape[1], g.shape[2]
    g2 = g.reshape(n * ho * wo, f)
    grad_k = (cols.T @ g2).reshape(kernels.shape)
    grad_b = g2.sum(axis=0) if has_bias else None
    if not input_grad:
        return None, grad_k, grad_b
    grad_x = np.zeros(in_shape, dtype=np.result_type(g.dtype, kernels.dtype))
    he = (ho - 1) * stride + 1
    we = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            contrib = (g2 @ kernels[i, j].T).reshape(n, ho, wo, c)
            grad_x[:, i:i + he:stride, j:j + we:stride, :] += contrib
    if squeeze:
        grad_x = grad_x[0]
    return grad_x, grad_k, grad_b


def maxpool(x, kernel, stride=None):
    """Per-channel max over each ``kernel`` window.

    Returns ``(out, argmax, cache)`` where ``argmax`` holds, for every output
    cell, the row-major offset of the winning element inside its window.  Ties
    go to the first element in row-major scan order.
    """
    xb, squeeze = _batched(x)
    kh, kw = _pair(kernel)
    if stride is None:
        stride = kh
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    n, h, w, c = xb.shape
    if kh > h or kw > w or kh < 1 or kw < 1:
        raise DimensionError(f"pool kernel {kh}x{kw} does not fit input {h}x{w}")
    ho = conv_output_size(h, kh, sh)
    wo = conv_output_size(w, kw, sw)
    he = (ho - 1) * sh + 1
    we = (wo - 1) * sw + 1
    # running max over window offsets; strict '>' keeps the first row-major index on ties
    out = xb[:, 0:he:sh, 0:we:sw, :].copy()
    arg = np.zeros(out.shape, dtype=np.int32)
    for i in range(kh):
        for j in range(kw):
            if i == 0 and j == 0:
                continue
            v = xb[:, i:i + he:sh, j:j + we:sw, :]
            better = v > out
            np.copyto(out, v, where=better)
            np.copyto(arg, i * kw + j, where=better)
    cache = Cache("maxpool", (xb.shape, arg, (kh, kw), (sh, sw), squeeze))
    if squeeze:
        return out[0], arg[0], cache
    return out, arg, cache


def maxpool_backward(grad_out, cache):
    in_shape, arg, (kh, kw), (sh, sw), squeeze = _check_cache(cache, "maxpool")
    g = np.asarray(grad_out)
    if squeeze:
        g = g[None]
    ho, wo = arg.shape[1], arg.shape[2]
    he = (ho - 1) * sh + 1
    we = (wo - 1) * sw + 1
    grad_x = np.zeros(in_shape, dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            hit = arg == i * kw + j
            if hit.any():
                grad_x[:, i:i + he:sh, j:j + we:sw, :] += g * hit
    if squeeze:
        grad_x = grad_x[0]
    return grad_x


def window_centers(size, kernel, stride):
    """Centre coordinate (in input index units) of every pooling window."""
    n = conv_output_size(size, kernel, stride)
    return np.arange(n) * stride + (kernel - 1) / 2.0


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, 0).astype(x.dtype, copy=False), Cache("relu", x > 0)


def relu_backward(grad_out, cache):
    mask = _check_cache(cache, "relu")
    g = np.asarray(grad_out)
    return g * mask


def l2_normalize(v):
    """Scale each vector along the last axis to unit Euclidean norm.

    A zero vector raises ``DegenerateInputError``; it means every activation
    feeding the descriptor died, which should not be papered over.
    """
    v = np.asarray(v)
    norm = np.sqrt(np.sum(np.square(v, dtype=np.float64), axis=-1, keepdims=True))
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    out = (v / norm).astype(v.dtype, copy=False)
    return out, Cache("l2_normalize", (out, norm))


def l2_normalize_backward(grad_out, cache):
    y, norm = _check_cache(cache, "l2_normalize")
    g = np.asarray(grad_out, dtype=np.float64)
    yd = y.astype(np.float64)
    proj = np.sum(g * yd, axis=-1, keepdims=True)
    return ((g - yd * proj) / norm).astype(y.dtype, copy=False)
