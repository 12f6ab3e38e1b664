"""Small neural-network building blocks on top of the tape.

Modules own their parameters as attributes; ``named_parameters`` walks them in
attribute-definition order, which fixes checkpoint entry order and optimizer
moment order.
"""
from __future__ import annotations

import math
import typing as t

import numpy as np

from ..errors import ContractError, DimensionError
from . import ops
from .random import RandomStream
from .tensor import Tensor, parameter


class Module:
    def named_parameters(self, prefix: str = "") -> t.Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.is_param:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def set_trainable(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: t.Mapping[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise ContractError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: stored {value.shape} vs model {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def astype(self, dtype: t.Any) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    """y = x W + b with W stored [in, out]; an attached LoRA adapter adds A·B to W."""

    def __init__(self, d_in: int, d_out: int, rng: RandomStream, *, bias: bool = True,
                 dtype: t.Any = np.float32, init_scale: float = 1.0):
        self.weight = parameter(rng.normal((d_in, d_out)) * (init_scale / math.sqrt(d_in)), dtype)
        self.bias = parameter(np.zeros(d_out), dtype) if bias else None
        self.lora: t.Any = None
        self.d_in, self.d_out = d_in, d_out

    def effective_weight(self) -> Tensor:
        if self.lora is None:
            return self.weight
        return self.lora.apply(self.weight)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects {self.d_in} input channels, got {x.shape}")
        y = ops.matmul(x, self.effective_weight())
        return ops.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, *, affine: bool = True, dtype: t.Any = np.float32):
        self.gain = parameter(np.ones(d), dtype) if affine else None
        self.bias = parameter(np.zeros(d), dtype) if affine else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: RandomStream, dtype: t.Any = np.float32):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype=dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.silu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return ops.swapaxes(ops.reshape(x, (*lead, n, heads, d // heads)), -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, dh = x.shape
    return ops.reshape(ops.swapaxes(x, -2, -3), (*lead, n, heads * dh))


class Attention(Module):
    """Multi-head attention; queries from ``d_q`` inputs, keys/values from ``d_kv`` inputs."""

    def __init__(self, d_q: int, d_kv: int, d_model: int, heads: int, rng: RandomStream,
                 dtype: t.Any = np.float32):
        if d_model % heads:
            raise DimensionError(f"d_model={d_model} is not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(d_q, d_model, rng, bias=False, dtype=dtype)
        self.k = Linear(d_kv, d_model, rng, bias=False, dtype=dtype)
        self.v = Linear(d_kv, d_model, rng, bias=False, dtype=dtype)
        self.o = Linear(d_model, d_model, rng, bias=False, dtype=dtype)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        context = x if context is None else context
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(context), self.heads)
        v = split_heads(self.v(context), self.heads)
        return self.o(merge_heads(ops.sdp_attention(q, k, v)))


def sinusoidal(t_values: np.ndarray, dim: int, scale: float = 1000.0) -> np.ndarray:
    """[B] times in [0, 1] -> [B, dim] sin/cos features of ``scale * t``."""
    t_values = np.asarray(t_values, dtype=np.float64).reshape(-1) * scale
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t_values[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


class TimestepEmbedding(Module):
    def __init__(self, d_model: int, rng: RandomStream, dtype: t.Any = np.float32):
        self.d_model = d_model
        self.mlp = MLP(d_model, d_model, d_model, rng, dtype=dtype)

    def __call__(self, t_values: np.ndarray) -> Tensor:
        dtype = self.mlp.fc1.weight.dtype
        return self.mlp(Tensor(sinusoidal(t_values, self.d_model).astype(dtype)))


class AdaLN(Module):
    """Non-affine layer norm modulated by (shift, scale) regressed from a conditioning vector."""

    def __init__(self, d: int, d_cond: int, rng: RandomStream, dtype: t.Any = np.float32):
        self.d = d
        self.mod = Linear(d_cond, 2 * d, rng, dtype=dtype, init_scale=0.1)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        # cond: [B, d_cond] -> broadcast over tokens as [B, 1, d]
        m = ops.reshape(ops.silu(cond), (cond.shape[0], 1, cond.shape[-1]))
        m = self.mod(m)
        shift = ops.slice_axis(m, -1, 0, self.d)
        scl = ops.slice_axis(m, -1, self.d, 2 * self.d)
        h = ops.layer_norm(x)
        return ops.add(ops.mul(h, ops.add(scl, 1.0)), shift)
