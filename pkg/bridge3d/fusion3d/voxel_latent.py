"""Dense voxel latents: +1 occupied / -1 empty, max-pool pyramids, patchify."""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError


def voxelize(grid: np.ndarray) -> np.ndarray:
    """Binary grid [G, G, G] -> latent values [G³, 1] in x-major token order."""
    grid = np.asarray(grid, dtype=bool)
    return np.where(grid, 1.0, -1.0).astype(np.float32).reshape(-1, 1)


def devoxelize(latent: np.ndarray, extent: int | None = None) -> np.ndarray:
    """Threshold at 0 (exact 0 counts as occupied) back to a binary grid."""
    latent = np.asarray(latent)
    n = latent.size
    g = extent or int(round(n ** (1.0 / 3.0)))
    if g ** 3 != n:
        raise DimensionError(f"latent of {n} values is not a cube of extent {g}")
    return (latent.reshape(g, g, g) >= 0.0)


def max_pool(grid: np.ndarray, factor: int) -> np.ndarray:
    g = grid.shape[0]
    if g % factor:
        raise DimensionError(f"grid extent {g} is not divisible by pooling factor {factor}")
    n = g // factor
    return grid.reshape(n, factor, n, factor, n, factor).any(axis=(1, 3, 5))


def downsample_to(grid: np.ndarray, extent: int) -> np.ndarray:
    """Successive 2x2x2 max-pooling down to ``extent``."""
    grid = np.asarray(grid, dtype=bool)
    while grid.shape[0] > extent:
        if grid.shape[0] % 2:
            raise DimensionError(f"cannot halve grid extent {grid.shape[0]} on the way to {extent}")
        grid = max_pool(grid, 2)
    if grid.shape[0] != extent:
        raise DimensionError(f"grid extent {grid.shape[0]} cannot reach {extent} by halving")
    return grid


def upsample_nearest(values: np.ndarray, factor: int) -> np.ndarray:
    """[g, g, g, ...] -> [g*f, g*f, g*f, ...] by repetition."""
    for axis in range(3):
        values = np.repeat(values, factor, axis=axis)
    return values


def patchify(volume: np.ndarray, patch: int) -> np.ndarray:
    """[G, G, G, C] -> [(G/p)³, p³·C] tokens, x-major over patches."""
    g, _, _, c = volume.shape
    n = g // patch
    v = volume.reshape(n, patch, n, patch, n, patch, c)
    return v.transpose(0, 2, 4, 1, 3, 5, 6).reshape(n ** 3, patch ** 3 * c)


def unpatchify(tokens: np.ndarray, extent: int, patch: int, channels: int) -> np.ndarray:
    n = extent // patch
    v = tokens.reshape(n, n, n, patch, patch, patch, channels)
    return v.transpose(0, 3, 1, 4, 2, 5, 6).reshape(extent, extent, extent, channels)
