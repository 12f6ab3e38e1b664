"""Invertible orthonormal patch codec between images and latent token sequences."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics.random import RandomStream


@dataclass
class LatentImage:
    tokens: np.ndarray          # [T_img, C]
    grid: tuple[int, int]       # patch rows, patch cols
    patch: int
    channels: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tokens.shape


@functools.lru_cache(maxsize=8)
def orthonormal_matrix(n: int, seed: int) -> np.ndarray:
    """Q from the QR factorization of a seeded Gaussian draw, columns sign-fixed."""
    a = RandomStream(seed).normal((n, n))
    q, r = np.linalg.qr(a)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    q = q * signs
    q.setflags(write=False)
    return q


class PatchCodec:
    def __init__(self, patch: int = 4, channels: int = 2, seed: int = 20240611):
        self.patch = patch
        self.channels = channels
        self.width = channels * patch * patch
        self.q = orthonormal_matrix(self.width, seed)

    def tokens_for(self, height: int, width: int) -> int:
        return (height // self.patch) * (width // self.patch)

    def encode(self, image: np.ndarray) -> LatentImage:
        image = np.asarray(image)
        c, h, w = image.shape
        p = self.patch
        if c != self.channels:
            raise DimensionError(f"codec expects {self.channels} channels, got {c}")
        if h % p or w % p:
            raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
        gh, gw = h // p, w // p
        patches = image.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)
        tokens = (patches.astype(np.float64) @ self.q).astype(image.dtype)
        return LatentImage(tokens=tokens, grid=(gh, gw), patch=p, channels=c)

    def decode(self, latent: LatentImage | np.ndarray, grid: tuple[int, int] | None = None) -> np.ndarray:
        if isinstance(latent, LatentImage):
            tokens, grid = latent.tokens, latent.grid
        else:
            tokens = np.asarray(latent)
        if grid is None:
            side = int(round(np.sqrt(tokens.shape[0])))
            grid = (side, side)
        gh, gw = grid
        p, c = self.patch, self.channels
        if tokens.ndim != 2 or tokens.shape != (gh * gw, self.width):
            raise DimensionError(f"latent shape {tokens.shape} does not match a {gh}x{gw} patch grid "
                                 f"of width {self.width}")
        patches = tokens.astype(np.float64) @ self.q.T
        image = patches.reshape(gh, gw, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, gh * p, gw * p)
        return image.astype(tokens.dtype)

    def encode_tokens(self, image: np.ndarray) -> np.ndarray:
        return self.encode(image).tokens
