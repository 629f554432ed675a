"""Differentiable kernels.

Every op takes :class:`Tensor` (or array-like constants) and returns a new
Tensor whose ``backward_fn`` yields one gradient per parent.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeMismatch
from .tensor import Tensor, as_tensor


def _result(data, parents, backward_fn):
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, parents=parents if requires else (),
                  backward_fn=backward_fn if requires else None)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _triple(x):
    if isinstance(x, (tuple, list)):
        if len(x) != 3:
            raise ShapeMismatch(f"expected 3 values, got {x}")
        return tuple(int(v) for v in x)
    return (int(x),) * 3


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- reductions and reshapes -------------------------------------------------

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def backward_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _result(out, (x,), backward_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    softmax = np.exp(out)
    return _result(out, (x,), lambda g: (g - softmax * g.sum(axis=axis, keepdims=True),))


# -- convolution -------------------------------------------------------------

def conv_output_dims(in_dims, kernel, stride, padding):
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(in_dims, kernel, stride, padding))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Zero-padded 3D cross-correlation of (N, C, D, H, W) with (K, C, kd, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    stride, padding = _triple(stride), _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeMismatch(f"conv3d expects 5-D input and weight, got {x.shape}, {weight.shape}")
    n, c = x.shape[:2]
    k, wc = weight.shape[:2]
    kernel = weight.shape[2:]
    if wc != c:
        raise ShapeMismatch(f"input has {c} channels, weight expects {wc}")
    if bias is not None and bias.shape != (k,):
        raise ShapeMismatch(f"bias shape {bias.shape} != ({k},)")
    padded_dims = tuple(d + 2 * p for d, p in zip(x.shape[2:], padding))
    if any(kd > pd for kd, pd in zip(kernel, padded_dims)):
        raise ShapeMismatch(f"kernel {kernel} larger than padded input {padded_dims}")
    out_dims = conv_output_dims(x.shape[2:], kernel, stride, padding)

    pad_width = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pad_width) if any(padding) else x.data
    sd, sh, sw = stride
    do, ho, wo = out_dims
    windows = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    windows = windows[:, :, :do, :ho, :wo]
    # im2col: (C*kd*kh*kw, N*Do*Ho*Wo), copied once and reused by the weight gradient
    cols = np.ascontiguousarray(windows.transpose(1, 5, 6, 7, 0, 2, 3, 4)).reshape(c * int(np.prod(kernel)), -1)
    w2 = weight.data.reshape(k, -1)
    out = (w2 @ cols).reshape(k, n, do, ho, wo).transpose(1, 0, 2, 3, 4)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, k, 1, 1, 1)

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(k, -1)
        grad_w = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        grad_b = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        grad_x = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape((c,) + kernel + (n, do, ho, wo))
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=x.dtype)
            for a in range(kernel[0]):
                for b in range(kernel[1]):
                    for cc in range(kernel[2]):
                        gxp[:, :, a: a + sd * (do - 1) + 1: sd,
                            b: b + sh * (ho - 1) + 1: sh,
                            cc: cc + sw * (wo - 1) + 1: sw] += dcols[:, a, b, cc]
            inner = gxp[(slice(None), slice(None)) + tuple(slice(p, p + d) for p, d in zip(padding, x.shape[2:]))]
            grad_x = np.ascontiguousarray(inner.transpose(1, 0, 2, 3, 4))
        return (grad_x, grad_w, grad_b)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _result(out, parents, lambda g: backward_fn(g)[: len(parents)])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """(N, C, H, W) convolution expressed as a depth-1 conv3d."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    x5 = reshape(x, (n, c, 1, h, w))
    w5 = reshape(weight, weight.shape[:2] + (1,) + weight.shape[2:])
    s = stride if isinstance(stride, (tuple, list)) else (stride, stride)
    p = padding if isinstance(padding, (tuple, list)) else (padding, padding)
    out = conv3d(x5, w5, bias, (1,) + tuple(s), (0,) + tuple(p))
    return reshape(out, (n, out.shape[1]) + out.shape[3:])


# -- normalisation -----------------------------------------------------------

def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over every axis except 1.

    In training mode the running statistics are updated in place
    (unbiased variance, exponential averaging with ``momentum``).
    """
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeMismatch(f"scale/shift must have length {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.size // c
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)

    def backward_fn(g):
        grad_scale = (g * xhat).sum(axis=axes)
        grad_shift = g.sum(axis=axes)
        dxhat = g * scale.data.reshape(bshape)
        if training:
            grad_x = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            grad_x = dxhat * inv_std.reshape(bshape)
        return grad_x, grad_scale, grad_shift

    return _result(out, (x, scale, shift), backward_fn)


# -- resampling --------------------------------------------------------------

def _linear_matrix(n_in, n_out, dtype):
    if n_in == n_out:
        return np.eye(n_in, dtype=dtype)
    src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(mat, (np.arange(n_out), lo), 1 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat


def _apply_axis(arr, mat, axis):
    return np.moveaxis(np.tensordot(mat, arr, axes=([1], [axis])), 0, axis)


def resample_volume(x: Tensor, dims, mode: str = "trilinear") -> Tensor:
    """Resize the three trailing spatial axes of (N, C, D, H, W) to ``dims``.

    Half-pixel-centre convention; an exact 2x trilinear reduction averages
    2x2x2 blocks.
    """
    x = as_tensor(x)
    dims = tuple(int(d) for d in dims)
    if x.ndim != 5 or len(dims) != 3:
        raise ShapeMismatch(f"resample_volume expects 5-D input and 3 target dims, got {x.shape}, {dims}")
    if min(dims) < 1:
        raise ShapeMismatch(f"target dims must be >= 1, got {dims}")
    if dims == x.shape[2:]:
        return _result(x.data.copy(), (x,), lambda g: (g,))
    if mode == "nearest":
        idx = [np.minimum(np.floor((np.arange(m) + 0.5) * n / m).astype(np.int64), n - 1)
               for n, m in zip(x.shape[2:], dims)]
        grid = np.ix_(*idx)
        out = x.data[(slice(None), slice(None)) + grid]

        def backward_fn(g):
            gx = np.zeros_like(x.data)
            full = np.ix_(np.arange(x.shape[0]), np.arange(x.shape[1]), *idx)
            np.add.at(gx, full, g)
            return (gx,)

        return _result(out, (x,), backward_fn)
    if mode != "trilinear":
        raise ValueError(f"unknown resample mode {mode!r}")
    mats = [_linear_matrix(n, m, x.dtype) for n, m in zip(x.shape[2:], dims)]
    out = x.data
    for axis, mat in zip((2, 3, 4), mats):
        out = _apply_axis(out, mat, axis)

    def backward_fn(g):
        for axis, mat in zip((4, 3, 2), reversed(mats)):
            g = _apply_axis(g, mat.T, axis)
        return (g,)

    return _result(np.ascontiguousarray(out), (x,), backward_fn)


# -- 2D -> 3D projection -----------------------------------------------------

def scatter_mean(x: Tensor, index: np.ndarray, n_bins: int) -> Tensor:
    """Average (N, C, P) pixel features into (N, C, n_bins) using per-pixel bin indices (N, P); -1 drops."""
    n, c, p = x.shape
    index = np.asarray(index, dtype=np.int64).reshape(n, p)
    keep = index >= 0
    flat = (index + (np.arange(n) * n_bins)[:, None])[keep]
    counts = np.bincount(flat, minlength=n * n_bins).astype(x.dtype)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    src = np.moveaxis(x.data, 1, 0)[:, keep]  # (C, kept)
    out = np.stack([np.bincount(flat, weights=src[ch], minlength=n * n_bins) for ch in range(c)])
    out = (out * inv).astype(x.dtype)
    out = np.moveaxis(out.reshape(c, n, n_bins), 0, 1)

    def backward_fn(g):
        gflat = np.moveaxis(g, 1, 0).reshape(c, n * n_bins) * inv
        gx = np.zeros((c, n, p), dtype=x.dtype)
        gx[:, keep] = gflat[:, flat]
        return (np.moveaxis(gx, 0, 1),)

    return _result(np.ascontiguousarray(out), (x,), backward_fn)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return _result(out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))
