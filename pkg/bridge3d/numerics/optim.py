from __future__ import annotations

import typing as t
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: t.Sequence[Tensor], grads: t.Mapping[Tensor, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place, for every tensor in ``params``.

    Moments are keyed by position in ``params``, so callers must pass the same
    ordered list every step.
    """
    missing = [i for i, p in enumerate(params) if p not in grads]
    if missing:
        raise ContractError(f"adam_step: no gradient for parameter(s) at positions {missing}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, p in enumerate(params):
        g = grads[p]
        if g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient {g.shape} for parameter {p.shape}")
        m = state.m.get(i)
        v = state.v.get(i)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[i], state.v[i] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
