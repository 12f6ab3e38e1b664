"""Conditional flow matching on the straight path z_t = (1 - t) z0 + t eps.

The velocity target is eps - z0, so sampling integrates from noise at t = 1
down to data at t = 0.
"""
from __future__ import annotations

import typing as t

import numpy as np

from ..errors import ContractError, DimensionError
from ..numerics import ops
from ..numerics.tensor import Tensor

VelocityField = t.Callable[[np.ndarray, float], np.ndarray]


def _check_time(tv: t.Any) -> np.ndarray:
    arr = np.asarray(tv, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0) or not np.all(np.isfinite(arr)):
        raise ContractError(f"flow time must lie in [0, 1], got {tv}")
    return arr


def cfm_interpolate(z0: np.ndarray, eps: np.ndarray, tv: float | np.ndarray) -> np.ndarray:
    """(1 - t) z0 + t eps; ``t`` is a scalar or one value per leading batch item."""
    z0, eps = np.asarray(z0), np.asarray(eps)
    if z0.shape != eps.shape:
        raise DimensionError(f"cfm_interpolate: z0 {z0.shape} vs eps {eps.shape}")
    arr = _check_time(tv)
    if arr.ndim:
        arr = arr.reshape(arr.shape + (1,) * (z0.ndim - arr.ndim))
    w = arr.astype(z0.dtype)
    return (1 - w) * z0 + w * eps


def cfm_target(z0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return np.asarray(eps) - np.asarray(z0)


def cfm_loss(v_pred: Tensor, eps: np.ndarray, z0: np.ndarray) -> Tensor:
    """Mean over all elements of (v_pred - (eps - z0))²."""
    return ops.mse(v_pred, cfm_target(z0, eps).astype(v_pred.dtype))


def step_times(steps: int) -> list[float]:
    """Times visited by the Euler sampler, in order: S/S, (S-1)/S, ..., 1/S."""
    if steps < 1:
        raise ContractError(f"sampler needs at least one step, got {steps}")
    return [k / steps for k in range(steps, 0, -1)]


def nearest_step(tap_time: float, steps: int) -> int:
    """Index into ``step_times(steps)`` closest to ``tap_time``; ties pick the earlier step."""
    _check_time(tap_time)
    times = step_times(steps)
    return min(range(steps), key=lambda i: (abs(times[i] - tap_time), i))


def euler_integrate(field: VelocityField, z: np.ndarray, steps: int,
                    stop_after: int | None = None) -> np.ndarray:
    """z <- z - (1/S) v(z, t_k) for t_k = k/S, k = S..1.

    ``stop_after`` ends the loop once that step index has been evaluated.
    """
    h = 1.0 / steps
    for i, tk in enumerate(step_times(steps)):
        z = z - h * field(z, tk)
        if stop_after is not None and i >= stop_after:
            break
    return z
