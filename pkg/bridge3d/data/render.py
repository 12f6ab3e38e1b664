"""Orthographic silhouette + depth renderer over voxel grids."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError
from .voxels import VoxelAsset

ELEVATION_RANGE = (-15.0, 45.0)
SCALES = (0.7, 0.85, 1.0, 1.15, 1.3)
VIEW_SPAN = 1.5  # image width at scale 1, in grid extents


@dataclass(frozen=True)
class Camera:
    azimuth: float
    elevation: float
    scale: float = 1.0

    def to_dict(self) -> dict[str, float]:
        return {"azimuth": self.azimuth, "elevation": self.elevation, "scale": self.scale}

    def opposite(self) -> "Camera":
        return Camera((self.azimuth + 180.0) % 360.0, self.elevation, self.scale)


def wrap_degrees(a: float) -> float:
    """Map to [-180, 180)."""
    return (a + 180.0) % 360.0 - 180.0


def _basis(azimuth: float, elevation: float) -> np.ndarray:
    # columns: image-right, image-up, viewing direction, all in the object frame
    a, e = math.radians(azimuth), math.radians(elevation)
    ca, sa, ce, se = math.cos(a), math.sin(a), math.cos(e), math.sin(e)
    ry = np.array([[ca, 0.0, -sa], [0.0, 1.0, 0.0], [sa, 0.0, ca]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ce, -se], [0.0, se, ce]])
    return rx @ ry


def camera_basis(camera: Camera) -> np.ndarray:
    """3x3 camera-to-object map; the camera at a+180 is the exact antipode of a."""
    # angles are snapped to 1e-9 degrees so that a and a+180 share one base rotation
    a = round(camera.azimuth % 360.0, 9) % 360.0
    if a >= 180.0:
        return _basis(round(a - 180.0, 9), camera.elevation) * np.array([-1.0, 1.0, -1.0])
    return _basis(a, camera.elevation)


def view_direction(camera: Camera) -> np.ndarray:
    return camera_basis(camera)[:, 2]


def _check_camera(camera: Camera) -> None:
    lo, hi = ELEVATION_RANGE
    if not lo - 1e-9 <= camera.elevation <= hi + 1e-9:
        raise ContractError(f"camera elevation {camera.elevation} outside [{lo}, {hi}]")
    if camera.scale <= 0:
        raise ContractError(f"camera scale must be positive, got {camera.scale}")


def render_ortho(asset: VoxelAsset | np.ndarray, camera: Camera, size: int = 32,
                 step: float = 0.5) -> np.ndarray:
    """float32 image [2, size, size]: channel 0 silhouette, channel 1 normalized depth."""
    _check_camera(camera)
    grid = asset.grid if isinstance(asset, VoxelAsset) else np.asarray(asset, dtype=bool)
    g = grid.shape[0]
    radius = g * math.sqrt(3.0) / 2.0
    n_samples = 2 * math.ceil(radius / step)
    ds = 2.0 * radius / n_samples
    s = (np.arange(n_samples) + 0.5 - n_samples / 2) * ds

    pixel = g * VIEW_SPAN / (size * camera.scale)
    offsets = np.arange(size) + 0.5 - size / 2
    u = offsets * pixel
    v = -offsets * pixel
    basis = camera_basis(camera)
    right, up, forward = basis[:, 0], basis[:, 1], basis[:, 2]

    plane = v[:, None, None] * up + u[None, :, None] * right        # [H, W, 3]
    pts = plane[:, :, None, :] + s[None, None, :, None] * forward   # [H, W, K, 3]
    idx = np.floor(pts + g / 2.0).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < g), axis=-1)
    idx = np.clip(idx, 0, g - 1)
    hit = inside & grid[idx[..., 0], idx[..., 1], idx[..., 2]]

    any_hit = hit.any(axis=-1)
    first = np.argmax(hit, axis=-1)
    depth = np.where(any_hit, (s[first] + radius) / (2.0 * radius), 1.0)
    return np.stack([any_hit.astype(np.float32), depth.astype(np.float32)])


def silhouette(image: np.ndarray) -> np.ndarray:
    return image[0] > 0.5
