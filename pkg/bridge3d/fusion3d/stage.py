"""One flow-matching stage of the voxel generator (sparse structure or fine geometry)."""
from __future__ import annotations

import typing as t
from dataclasses import dataclass

import numpy as np

from ..config_store import RunConfig
from ..errors import ContractError, DimensionError
from ..numerics import ops
from ..numerics.layers import AdaLN, Linear, Module, TimestepEmbedding
from ..numerics.random import RandomStream
from ..numerics.tensor import Tensor, parameter
from .layers import FrontImageEncoder, FusedBlock
from .voxel_latent import devoxelize, downsample_to, patchify, unpatchify, upsample_nearest, voxelize

STAGES = ("sparse", "fine")


@dataclass(frozen=True)
class StageDims:
    tag: str
    grid: int
    patch: int
    d_model: int
    layers: int
    heads: int
    image_size: int
    image_patch: int
    d_feature: int | None
    d_inj: int | None
    inject_blocks: tuple[int, ...] | None = None
    sparse_grid: int = 8

    @property
    def tokens(self) -> int:
        return (self.grid // self.patch) ** 3

    @property
    def value_channels(self) -> int:
        return self.patch ** 3

    @property
    def cond_channels(self) -> int:
        return self.value_channels if self.tag == "fine" else 0

    @property
    def image_tokens(self) -> int:
        return (self.image_size // self.image_patch) ** 2

    @classmethod
    def from_config(cls, cfg: RunConfig, tag: str, d_feature: int | None) -> "StageDims":
        g = cfg.gen3d
        if tag not in STAGES:
            raise ContractError(f"unknown stage {tag!r}")
        blocks = tuple(g.inject_blocks) if g.inject_blocks is not None else None
        return cls(tag=tag, grid=g.sparse_grid if tag == "sparse" else g.fine_grid,
                   patch=1 if tag == "sparse" else g.fine_patch, d_model=g.d_model, layers=g.layers,
                   heads=g.heads, image_size=cfg.dataset.image_size, image_patch=cfg.codec.patch,
                   d_feature=d_feature, d_inj=g.injection_width,
                   inject_blocks=blocks, sparse_grid=g.sparse_grid)


class GenStage(Module):
    def __init__(self, dims: StageDims, rng: RandomStream, dtype: t.Any = np.float32):
        d = dims.d_model
        self.dims = dims
        self.inp = Linear(dims.value_channels + dims.cond_channels, d, rng, dtype=dtype)
        self.position = parameter(rng.normal((dims.tokens, d)) * 0.1, dtype)
        self.time = TimestepEmbedding(d, rng, dtype=dtype)
        self.image = FrontImageEncoder(2, dims.image_patch, d, rng, dtype=dtype)
        self.image_position = parameter(rng.normal((dims.image_tokens, d)) * 0.1, dtype)
        chosen = set(dims.inject_blocks) if dims.inject_blocks is not None else set(range(1, dims.layers + 1))
        self.blocks = [
            FusedBlock(d, d, dims.heads, rng.fork(f"block{i}"),
                       d_feature=dims.d_feature if i in chosen else None, d_inj=dims.d_inj, dtype=dtype)
            for i in range(1, dims.layers + 1)
        ]
        self.out_norm = AdaLN(d, d, rng, dtype=dtype)
        self.head = Linear(d, dims.value_channels, rng, dtype=dtype)

    @property
    def dtype(self) -> np.dtype:
        return self.head.weight.dtype

    def injection_adapters(self) -> list[Module]:
        return [b.injection for b in self.blocks if b.injection is not None]

    # latent <-> grid conversions for this stage

    def targets(self, grid: np.ndarray) -> np.ndarray:
        """Ground-truth tokens [T, value_channels] from a full-resolution occupancy grid."""
        values = voxelize(downsample_to(grid, self.dims.grid)).reshape((self.dims.grid,) * 3 + (1,))
        return patchify(values, self.dims.patch)

    def decode(self, tokens: np.ndarray) -> np.ndarray:
        values = unpatchify(np.asarray(tokens), self.dims.grid, self.dims.patch, 1)
        return devoxelize(values, self.dims.grid)

    def structure_tokens(self, v_ss: np.ndarray) -> np.ndarray:
        """Sparse-structure grids [B, g, g, g] -> conditioning tokens at this stage's resolution."""
        v_ss = np.asarray(v_ss)
        if v_ss.ndim == 3:
            v_ss = v_ss[None]
        factor = self.dims.grid // v_ss.shape[1]
        out = []
        for grid in v_ss:
            values = np.where(grid.astype(bool), 1.0, -1.0)[..., None]
            out.append(patchify(upsample_nearest(values, factor), self.dims.patch))
        return np.stack(out).astype(self.dtype)

    def __call__(self, x: np.ndarray, tau: np.ndarray | float, front: np.ndarray,
                 features: np.ndarray | Tensor | None = None, v_ss: np.ndarray | None = None) -> Tensor:
        return stage_forward(self, x, tau, front, features, v_ss)


def stage_forward(stage: GenStage, x: np.ndarray, tau: np.ndarray | float, front: np.ndarray,
                  features: np.ndarray | Tensor | None = None, v_ss: np.ndarray | None = None) -> Tensor:
    """Velocity over the stage's tokens; ``features`` None skips every injection branch."""
    dims = stage.dims
    if dims.tag == "sparse" and v_ss is not None:
        raise ContractError("the sparse stage takes no structure conditioning")
    if dims.tag == "fine" and v_ss is None:
        raise ContractError("the fine stage needs the sparse structure V_ss")
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (dims.tokens, dims.value_channels):
        raise DimensionError(f"{dims.tag} latent has shape {x.shape[1:]}, expected {(dims.tokens, dims.value_channels)}")
    b = x.shape[0]
    inp = x.astype(stage.dtype)
    if v_ss is not None:
        structure = stage.structure_tokens(v_ss)
        if structure.shape[0] != b:
            raise DimensionError(f"structure batch {structure.shape[0]} != latent batch {b}")
        inp = np.concatenate([inp, structure], axis=-1)
    if features is not None and not isinstance(features, Tensor):
        features = np.asarray(features, dtype=stage.dtype)
        features = Tensor(features if features.ndim == 3 else features[None])

    h = ops.add(stage.inp(Tensor(inp)), stage.position)
    temb = stage.time(np.broadcast_to(np.asarray(tau, dtype=np.float64), (b,)))
    f_img = ops.add(stage.image(front), stage.image_position)
    for block in stage.blocks:
        h = block(h, temb, f_img, features)
    return stage.head(stage.out_norm(h, temb))
