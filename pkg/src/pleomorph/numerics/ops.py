"""Differentiable array operations (NCHW layout for images)."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidShapeError
from .tensor import Tensor, as_tensor, record


def _like(x: Tensor, other) -> Tensor:
    """Coerce a python scalar/array to a tensor of x's dtype."""
    if isinstance(other, Tensor):
        return other
    return Tensor(np.asarray(other, dtype=x.dtype))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _like(a, b)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _like(b, a)
    b = _like(a, b)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _like(a, b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype, copy=False))
    return record(out, (x,), lambda g: (g * mask,), "relu")


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return record(out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    return record(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


# linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = Tensor(a.data @ b.data)
    return record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, in), weight (out, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def backward(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ weight.data, g.T @ x.data, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, backward, "linear")


# convolution -----------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (N, C, H, W) with weight (F, C, kh, kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise InvalidShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = weight.shape
    if ck != c:
        raise InvalidShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if stride < 1 or padding < 0:
        raise InvalidShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise InvalidShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, -1)
    y = cols @ wmat.T
    if bias is not None:
        y += bias.data
    out = Tensor(np.ascontiguousarray(y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gm.T @ cols).reshape(weight.shape)
        gb = gm.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, backward, "conv2d")


# pooling ---------------------------------------------------------------------

def _pool_crop(x: Tensor, k: int):
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise InvalidShapeError(f"pool window {k} larger than input {h}x{w}")
    return x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k), ho, wo


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/columns are dropped."""
    blocks, ho, wo = _pool_crop(x, k)
    n, c = x.shape[:2]
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :ho * k, :wo * k] = gflat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, ho * k, wo * k)
        return (gx,)

    return record(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    blocks, ho, wo = _pool_crop(x, k)
    out = Tensor(blocks.mean(axis=(3, 5)))

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :ho * k, :wo * k] = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return record(out, (x,), backward, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    return record(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),), "gap")


# normalization ---------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over every axis except 1.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, like most frameworks).
    """
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = [1] * x.data.ndim
    bshape[1] = x.shape[1]
    bshape = tuple(bshape)
    if training:
        m = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        m = None
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = Tensor(xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape))

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            sum_d = dxhat.sum(axis=axes).reshape(bshape)
            sum_dx = (dxhat * xhat).sum(axis=axes).reshape(bshape)
            gx = (inv_std.reshape(bshape) / m) * (m * dxhat - sum_d - xhat * sum_dx)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), backward, "batch_norm")


# structural ------------------------------------------------------------------

def dense_concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Channel-axis concatenation, in argument order."""
    inputs = list(inputs)
    if not inputs:
        raise InvalidShapeError("dense_concat needs at least one input")
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.data.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise InvalidShapeError(f"dense_concat: shape {t.shape} incompatible with {ref} off axis {axis}")
    sizes = [t.shape[axis] for t in inputs]
    out = Tensor(np.concatenate([t.data for t in inputs], axis=axis))
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tuple(inputs), backward, "dense_concat")


def split_channels(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`dense_concat`."""
    if sum(sizes) != x.shape[axis]:
        raise InvalidShapeError(f"split sizes {list(sizes)} do not sum to {x.shape[axis]}")
    outs = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * x.data.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)
        piece = Tensor(x.data[sl].copy())

        def backward(g, sl=sl):
            gx = np.zeros(x.shape, dtype=g.dtype)
            gx[sl] = g
            return (gx,)

        outs.append(record(piece, (x,), backward, "split"))
        start += size
    return outs
