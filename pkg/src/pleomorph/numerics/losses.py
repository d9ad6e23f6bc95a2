"""Loss functions: smooth L1 regression loss and cosine similarity."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError, InvalidConfigError, InvalidShapeError
from .tensor import Tensor, as_tensor, record


def smooth_l1(prediction, target, alpha: float = 1.0) -> Tensor:
    """Elementwise smooth L1 of ``prediction - target``.

    ``|x|`` where ``|x| > alpha`` and ``x**2 / alpha`` otherwise. Note the
    quadratic coefficient is ``1/alpha``, not the more common ``0.5/alpha``,
    so the two branches meet at ``|x| = alpha`` in value but not in slope.
    """
    if not alpha > 0:
        raise InvalidConfigError(f"smooth_l1 alpha must be > 0, got {alpha!r}")
    prediction = as_tensor(prediction)
    target_data = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=prediction.dtype)
    x = prediction.data - target_data
    ax = np.abs(x)
    linear = ax > alpha
    out = Tensor(np.where(linear, ax, x * x / alpha).astype(prediction.dtype, copy=False))

    def backward(g):
        d = np.where(linear, np.sign(x), 2.0 * x / alpha).astype(g.dtype, copy=False)
        return (g * d,)

    return record(out, (prediction,), backward, "smooth_l1")


def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity along the last axis (row-wise for 2-d inputs)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim == 0 or a.shape[-1] < 1:
        raise InvalidShapeError(f"cosine_similarity shapes {a.shape} and {b.shape} differ")
    na = np.linalg.norm(a.data, axis=-1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)
    out = Tensor(np.clip(cos[..., 0], -1.0, 1.0))

    def backward(g):
        g = g[..., None]
        ga = g * (b.data / (na * nb) - cos * a.data / (na * na))
        gb = g * (a.data / (na * nb) - cos * b.data / (nb * nb))
        return ga, gb

    return record(out, (a, b), backward, "cosine")
