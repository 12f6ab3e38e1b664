"""The bridge: a prompt-conditioned flow-matching transformer over image latents.

Tokens of the noisy back latent, the clean front latent and the condition
encoding are concatenated and processed with joint self-attention. Timestep
conditioning enters through adaptive layer norms. Every block's output on the
noisy-latent slots is returned so callers can tap intermediate states.
"""
from __future__ import annotations

import logging
import typing as t
from dataclasses import dataclass

import numpy as np

from ..config_store import RunConfig
from ..data.annotate import VOCAB
from ..errors import ContractError, DimensionError
from ..numerics import ops
from ..numerics.layers import MLP, AdaLN, Attention, LayerNorm, Linear, Module, TimestepEmbedding
from ..numerics.random import RandomStream
from ..numerics.tensor import Tensor, parameter
from .prompt import MAX_PROMPT

logger = logging.getLogger(__name__)

MODALITY_NOISY, MODALITY_FRONT, MODALITY_COND = 0, 1, 2


@dataclass(frozen=True)
class BridgeDims:
    latent_width: int
    tokens: int
    d_model: int
    layers: int
    heads: int
    encoder_layers: int
    vocab: int = len(VOCAB)
    max_prompt: int = MAX_PROMPT

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "BridgeDims":
        p = cfg.codec.patch
        return cls(latent_width=2 * p * p, tokens=(cfg.dataset.image_size // p) ** 2,
                   d_model=cfg.bridge.d_model, layers=cfg.bridge.layers, heads=cfg.bridge.heads,
                   encoder_layers=cfg.bridge.encoder_layers)


class EncoderBlock(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, rng: RandomStream, dtype: t.Any):
        self.ln1 = LayerNorm(d, dtype=dtype)
        self.attn = Attention(d, d, d, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype=dtype)
        self.mlp = MLP(d, 2 * d, d, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.ln1(x)))
        return ops.add(x, self.mlp(self.ln2(x)))


class ConditionEncoder(Module):
    """Prompt tokens and front-latent tokens -> condition features [B, P + T, d]."""

    def __init__(self, dims: BridgeDims, rng: RandomStream, dtype: t.Any):
        d = dims.d_model
        self.dims = dims
        self.token_embedding = parameter(rng.normal((dims.vocab, d)) * 0.5, dtype)
        self.prompt_position = parameter(rng.normal((dims.max_prompt, d)) * 0.1, dtype)
        self.front_proj = Linear(dims.latent_width, d, rng, dtype=dtype)
        self.patch_position = parameter(rng.normal((dims.tokens, d)) * 0.1, dtype)
        self.blocks = [EncoderBlock(d, dims.heads, rng, dtype) for _ in range(dims.encoder_layers)]
        self.norm = LayerNorm(d, dtype=dtype)

    def __call__(self, z_front: np.ndarray, prompt_ids: np.ndarray) -> Tensor:
        b, n_prompt = prompt_ids.shape
        if n_prompt > self.dims.max_prompt:
            raise ContractError(f"prompt of {n_prompt} tokens exceeds the limit of {self.dims.max_prompt}")
        if prompt_ids.size and (prompt_ids.min() < 0 or prompt_ids.max() >= self.dims.vocab):
            raise ContractError(f"prompt token ids {prompt_ids.tolist()} outside vocabulary of size {self.dims.vocab}")
        words = ops.add(ops.embedding(self.token_embedding, prompt_ids),
                        ops.slice_axis(self.prompt_position, 0, 0, n_prompt))
        patches = ops.add(self.front_proj(Tensor(z_front.astype(self.dtype))), self.patch_position)
        x = ops.concat([words, patches], axis=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    @property
    def dtype(self) -> np.dtype:
        return self.token_embedding.dtype


class JointBlock(Module):
    def __init__(self, d: int, heads: int, rng: RandomStream, dtype: t.Any):
        self.norm1 = AdaLN(d, d, rng, dtype=dtype)
        self.attn = Attention(d, d, d, heads, rng, dtype=dtype)
        self.norm2 = AdaLN(d, d, rng, dtype=dtype)
        self.mlp = MLP(d, 2 * d, d, rng, dtype=dtype)

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.norm1(x, temb)))
        return ops.add(x, self.mlp(self.norm2(x, temb)))


class BridgeModel(Module):
    def __init__(self, dims: BridgeDims, rng: RandomStream, dtype: t.Any = np.float32):
        d = dims.d_model
        self.dims = dims
        self.encoder = ConditionEncoder(dims, rng.fork("encoder"), dtype)
        rng = rng.fork("denoiser")
        self.noisy_in = Linear(dims.latent_width, d, rng, dtype=dtype)
        self.front_in = Linear(dims.latent_width, d, rng, dtype=dtype)
        self.patch_position = parameter(rng.normal((dims.tokens, d)) * 0.1, dtype)
        self.modality = parameter(rng.normal((3, d)) * 0.1, dtype)
        self.time = TimestepEmbedding(d, rng, dtype=dtype)
        self.blocks = [JointBlock(d, dims.heads, rng, dtype) for _ in range(dims.layers)]
        self.out_norm = AdaLN(d, d, rng, dtype=dtype)
        self.head = Linear(d, dims.latent_width, rng, dtype=dtype)

    @classmethod
    def from_config(cls, cfg: RunConfig, seed: int | None = None) -> "BridgeModel":
        seed = cfg.train.seed if seed is None else seed
        dtype = np.dtype(cfg.train.dtype)
        return cls(BridgeDims.from_config(cfg), RandomStream(seed).fork("bridge-init"), dtype)

    @property
    def dtype(self) -> np.dtype:
        return self.head.weight.dtype

    def encode_condition(self, z_front: np.ndarray, prompt_ids: np.ndarray) -> Tensor:
        """H_vlm for a batch sharing one prompt length: [B, P + T, d]."""
        z_front, prompt_ids = _batched(z_front, 3), _batched(np.asarray(prompt_ids, dtype=np.int64), 2)
        self._check_latent(z_front, "z_front")
        return self.encoder(z_front, prompt_ids)

    def _check_latent(self, z: np.ndarray, name: str) -> None:
        want = (self.dims.tokens, self.dims.latent_width)
        if z.shape[1:] != want:
            raise DimensionError(f"{name} has shape {z.shape[1:]}, expected {want}")

    def forward(self, z_t: np.ndarray, tv: np.ndarray | float, cond: Tensor,
                z_front: np.ndarray) -> tuple[Tensor, list[Tensor]]:
        """Velocity [B, T, C] on the noisy slots and the L per-block outputs there."""
        z_t, z_front = _batched(z_t, 3), _batched(z_front, 3)
        self._check_latent(z_t, "z_t")
        self._check_latent(z_front, "z_front")
        b = z_t.shape[0]
        if cond.ndim != 3 or cond.shape[0] != b or cond.shape[2] != self.dims.d_model:
            raise DimensionError(f"condition shape {cond.shape} incompatible with batch {b} "
                                 f"and d_model {self.dims.d_model}")
        tv = np.broadcast_to(np.asarray(tv, dtype=np.float64), (b,))
        n = self.dims.tokens
        noisy = ops.add(ops.add(self.noisy_in(Tensor(z_t.astype(self.dtype))), self.patch_position),
                        ops.slice_axis(self.modality, 0, 0, 1))
        front = ops.add(ops.add(self.front_in(Tensor(z_front.astype(self.dtype))), self.patch_position),
                        ops.slice_axis(self.modality, 0, 1, 2))
        cond = ops.add(cond, ops.slice_axis(self.modality, 0, 2, 3))
        x = ops.concat([noisy, front, cond], axis=1)
        temb = self.time(tv)
        hidden = []
        for block in self.blocks:
            x = block(x, temb)
            hidden.append(ops.slice_axis(x, 1, 0, n))
        out = self.head(self.out_norm(ops.slice_axis(x, 1, 0, n), temb))
        return out, hidden

    def velocity(self, z_t: np.ndarray, tv: float, cond: Tensor, z_front: np.ndarray) -> np.ndarray:
        return self.forward(z_t, tv, cond, z_front)[0].data


def _batched(x: np.ndarray, rank: int) -> np.ndarray:
    x = np.asarray(x)
    return x[None] if x.ndim == rank - 1 else x
