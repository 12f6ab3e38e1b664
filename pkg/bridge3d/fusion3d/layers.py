"""Injection branch, LoRA adapters and the fused transformer block of the voxel generator."""
from __future__ import annotations

import math
import typing as t

import numpy as np

from ..errors import ContractError, DimensionError
from ..numerics import ops
from ..numerics.layers import MLP, AdaLN, Attention, LayerNorm, Linear, Module
from ..numerics.random import RandomStream
from ..numerics.tensor import Tensor, parameter


class ZeroLinear(Linear):
    """Linear map whose weight and bias start at exactly zero."""

    def __init__(self, d_in: int, d_out: int, rng: RandomStream, dtype: t.Any = np.float32):
        super().__init__(d_in, d_out, rng, bias=True, dtype=dtype)
        self.weight.data = np.zeros_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)


class LoRAAdapter(Module):
    """Low-rank update (alpha / r) · A · B for a frozen [d_in, d_out] weight; B starts at zero."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, rng: RandomStream,
                 dtype: t.Any = np.float32):
        if rank < 1:
            raise ContractError(f"LoRA rank must be at least 1, got {rank}")
        self.rank = rank
        self.scaling = alpha / rank
        self.A = parameter(rng.normal((d_in, rank)) / math.sqrt(d_in), dtype)
        self.B = parameter(np.zeros((rank, d_out)), dtype)

    def apply(self, weight: Tensor) -> Tensor:
        if weight.shape != (self.A.shape[0], self.B.shape[1]):
            raise DimensionError(f"LoRA factors {self.A.shape} x {self.B.shape} do not match weight {weight.shape}")
        return ops.add(weight, ops.scale(ops.matmul(self.A, self.B), self.scaling))


def lora_apply(weight: np.ndarray, adapter: LoRAAdapter) -> np.ndarray:
    """Effective weight W + (alpha / r) · A · B as a plain array."""
    return adapter.apply(Tensor(np.asarray(weight, dtype=adapter.A.dtype))).data


def linear_layers(module: Module) -> t.Iterator[Linear]:
    """Every backbone Linear reachable from ``module``; injection branches are not descended into."""
    for value in vars(module).values():
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            if isinstance(item, InjectionAdapter):
                continue
            if isinstance(item, Linear):
                yield item
            elif isinstance(item, Module):
                yield from linear_layers(item)


def attach_lora(module: Module, rank: int, alpha: float, rng: RandomStream) -> list[LoRAAdapter]:
    adapters = []
    for i, layer in enumerate(linear_layers(module)):
        if isinstance(layer, ZeroLinear) or layer.lora is not None:
            continue
        layer.lora = LoRAAdapter(layer.d_in, layer.d_out, rank, alpha, rng.fork(i), dtype=layer.weight.dtype)
        adapters.append(layer.lora)
    return adapters


class InjectionAdapter(Module):
    """Projection + layer norm of tapped features, cross-attention from the backbone, zero-initialized output."""

    def __init__(self, d_feature: int, d_inj: int, d_model: int, heads: int, rng: RandomStream,
                 dtype: t.Any = np.float32):
        self.d_feature = d_feature
        self.proj = Linear(d_feature, d_inj, rng, dtype=dtype)
        self.norm = LayerNorm(d_inj, dtype=dtype)
        self.attn = Attention(d_model, d_inj, d_model, heads, rng, dtype=dtype)
        self.zero = ZeroLinear(d_model, d_model, rng, dtype=dtype)

    def project(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.d_feature:
            raise DimensionError(f"injected features have width {features.shape[-1]}, expected {self.d_feature}")
        return self.norm(self.proj(features))

    def __call__(self, queries: Tensor, features: Tensor) -> Tensor:
        return self.zero(self.attn(queries, self.project(features)))


def project_hidden(features: np.ndarray | Tensor, adapter: InjectionAdapter) -> Tensor:
    """H' = LayerNorm(Linear(H)), per token."""
    if not isinstance(features, Tensor):
        features = Tensor(np.asarray(features, dtype=adapter.proj.weight.dtype))
    return adapter.project(features)


class FrontImageEncoder(Module):
    """Linear patch embedding of the front image into condition tokens."""

    def __init__(self, channels: int, patch: int, d_cond: int, rng: RandomStream, dtype: t.Any = np.float32):
        self.channels, self.patch = channels, patch
        self.embed = Linear(channels * patch * patch, d_cond, rng, dtype=dtype)

    def __call__(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        b, c, h, w = images.shape
        p = self.patch
        if c != self.channels or h % p or w % p:
            raise DimensionError(f"front image {images.shape[1:]} incompatible with {self.channels} "
                                 f"channels and patch {p}")
        patches = images.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
        patches = patches.reshape(b, (h // p) * (w // p), c * p * p)
        return self.embed(Tensor(patches.astype(self.embed.weight.dtype)))


def encode_front_image(encoder: FrontImageEncoder, image: np.ndarray) -> Tensor:
    return encoder(image)


class FusedBlock(Module):
    """Self-attention, image cross-attention and the parallel injection branch, then a feed-forward sublayer.

    F_sa = F + SelfAttn(adaLN(F)); F_out = F_sa + CrossAttn(q, F_img) + ZeroLinear(CrossAttn(q, H')),
    with q = LN(F_sa) shared by both cross-attentions.
    """

    def __init__(self, d: int, d_cond: int, heads: int, rng: RandomStream, *, d_feature: int | None = None,
                 d_inj: int | None = None, dtype: t.Any = np.float32):
        self.norm1 = AdaLN(d, d, rng, dtype=dtype)
        self.self_attn = Attention(d, d, d, heads, rng, dtype=dtype)
        self.norm_q = LayerNorm(d, dtype=dtype)
        self.img_attn = Attention(d, d_cond, d, heads, rng, dtype=dtype)
        self.norm2 = AdaLN(d, d, rng, dtype=dtype)
        self.mlp = MLP(d, 2 * d, d, rng, dtype=dtype)
        self.injection: InjectionAdapter | None = None
        if d_feature is not None:
            self.injection = InjectionAdapter(d_feature, d_inj or d, d, heads, rng.fork("injection"), dtype=dtype)

    def __call__(self, x: Tensor, temb: Tensor, f_img: Tensor, features: Tensor | None = None) -> Tensor:
        x = ops.add(x, self.self_attn(self.norm1(x, temb)))
        q = self.norm_q(x)
        x = ops.add(x, self.img_attn(q, f_img))
        if features is not None and self.injection is not None:
            x = ops.add(x, self.injection(q, features))
        return ops.add(x, self.mlp(self.norm2(x, temb)))


def fused_block(block: FusedBlock, f: Tensor, temb: Tensor, f_img: Tensor, features: Tensor | None = None) -> Tensor:
    return block(f, temb, f_img, features)
