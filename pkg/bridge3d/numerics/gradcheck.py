"""Central-difference gradient checking (float64 only)."""
from __future__ import annotations

import logging
import typing as t

import numpy as np

from ..errors import ContractError, NumericError
from .tensor import Tape, Tensor, backward, paused

logger = logging.getLogger(__name__)


def _evaluate(f: t.Callable[[], Tensor]) -> float:
    with paused():
        value = float(f().data.reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericError(f"gradcheck: loss is not finite ({value})")
    return value


def gradcheck(f: t.Callable[[], Tensor], params: t.Sequence[Tensor], eps: float = 1e-5,
              floor: float = 1e-8) -> float:
    """Max relative error between tape gradients and central differences.

    Errors are relative to max(|analytic|, |numeric|, floor), so entries with
    near-zero gradients are compared absolutely.

    ``f`` takes no arguments and reads ``params`` by reference; each parameter
    entry is nudged in place and restored.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"gradcheck needs float64 parameters, got {p.dtype}")
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("gradcheck: loss is not finite")
    grads = backward(tape, loss)

    worst = 0.0
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        analytic = grads.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        ga = analytic.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = _evaluate(f)
            flat[i] = saved - eps
            down = _evaluate(f)
            flat[i] = saved
            cd = (up - down) / (2.0 * eps)
            denom = max(abs(ga[i]), abs(cd), floor)
            worst = max(worst, abs(ga[i] - cd) / denom)
    logger.debug("gradcheck over %d tensors: max rel err %.3e", len(params), worst)
    return worst
