"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import DegenerateInputError, InvalidInputError
from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    excluded: int
    errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray


def _scalar(value) -> float:
    v = value.data if isinstance(value, Tensor) else np.asarray(value)
    if v.size != 1:
        raise InvalidInputError(f"grad_check needs a scalar function, got shape {v.shape}")
    v = float(v.reshape(-1)[0])
    if not np.isfinite(v):
        raise DegenerateInputError("function value is not finite")
    return v


def grad_check_report(function: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5,
                      coords=None, kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare tape gradients of ``function`` at ``point`` against central differences.

    ``coords`` restricts the check to a subset of flat indices. Coordinates
    whose one-sided differences disagree by more than ``kink_tol`` (relative)
    straddle a non-differentiable point and are excluded.
    """
    if not h > 0:
        raise InvalidInputError(f"step h must be > 0, got {h!r}")
    point.requires_grad = True
    point.grad = None
    with Tape() as tape:
        out = function(point)
    f0 = _scalar(out)
    tape.backward(out)
    grad = point.grad if point.grad is not None else np.zeros_like(point.data)
    analytic_all = grad.reshape(-1).astype(np.float64)

    flat = point.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64).reshape(-1)
    analytic = analytic_all[idx]
    numeric = np.empty(len(idx))
    keep = np.ones(len(idx), dtype=bool)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(function(point))
        flat[i] = orig - h
        fm = _scalar(function(point))
        flat[i] = orig
        numeric[n] = (fp - fm) / (2 * h)
        forward, backward = (fp - f0) / h, (f0 - fm) / h
        if abs(forward - backward) > kink_tol * max(1.0, abs(forward), abs(backward)):
            keep[n] = False
    errors = np.abs(analytic - numeric) / np.maximum.reduce([np.ones_like(numeric), np.abs(analytic), np.abs(numeric)])
    errors = np.where(keep, errors, 0.0)
    return GradCheckReport(
        max_rel_error=float(errors.max()) if len(errors) else 0.0,
        checked=int(keep.sum()),
        excluded=int((~keep).sum()),
        errors=errors,
        analytic=analytic,
        numeric=numeric,
    )


def grad_check(function, point: Tensor, h: float = 1e-5, coords=None) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)."""
    return grad_check_report(function, point, h, coords).max_rel_error
