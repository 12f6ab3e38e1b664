"""Front/back view pairing on a uniform azimuth lattice."""
from __future__ import annotations

import typing as t
from dataclasses import dataclass

import numpy as np

from ..numerics.random import RandomStream
from .render import ELEVATION_RANGE, SCALES, Camera, render_ortho, wrap_degrees
from .voxels import VoxelAsset


@dataclass(frozen=True)
class Rig:
    """Per-asset camera settings shared by all of its views."""
    elevation: float
    scale: float


@dataclass
class ViewPair:
    front: np.ndarray
    back: np.ndarray
    front_camera: Camera
    back_camera: Camera
    asset_id: str
    pair_id: str = ""


def sample_rig(rng: RandomStream, scales: t.Sequence[float] = SCALES,
               elevation_range: tuple[float, float] = ELEVATION_RANGE) -> Rig:
    lo, hi = elevation_range
    return Rig(elevation=float(rng.uniform_range(lo, hi)), scale=float(rng.choice(list(scales))))


def front_azimuths(rng: RandomStream, spacing_deg: float) -> list[float]:
    """Lattice azimuths phi + k*spacing (one random phase) whose wrapped value lies in [-90, 90)."""
    n = int(round(360.0 / spacing_deg))
    phase = float(rng.uniform_range(0.0, spacing_deg))
    views = [(phase + k * spacing_deg) % 360.0 for k in range(n)]
    fronts = [a for a in views if -90.0 <= wrap_degrees(a) < 90.0]
    return sorted(fronts, key=wrap_degrees)


def _pair(asset: VoxelAsset, front: Camera, back: Camera, asset_id: str, tag: str,
          size: int, step: float) -> ViewPair:
    return ViewPair(front=render_ortho(asset, front, size, step), back=render_ortho(asset, back, size, step),
                    front_camera=front, back_camera=back, asset_id=asset_id, pair_id=tag)


def build_pairs(asset: VoxelAsset, rng: RandomStream, spacing_deg: float = 30.0, rig: Rig | None = None,
                asset_id: str = "", size: int = 32, step: float = 0.5, set_name: str = "clean") -> list[ViewPair]:
    """Pair each front view of the lattice with its opposite view (same elevation and scale)."""
    rig = rig or sample_rig(rng.fork("rig"))
    out = []
    for k, az in enumerate(front_azimuths(rng, spacing_deg)):
        front = Camera(az, rig.elevation, rig.scale)
        out.append(_pair(asset, front, front.opposite(), asset_id, f"{asset_id}/{set_name}/{k}", size, step))
    return out


def build_perturbed_pairs(asset: VoxelAsset, rng: RandomStream, spacing_deg: float = 45.0, rig: Rig | None = None,
                          asset_id: str = "", size: int = 32, step: float = 0.5,
                          scale_jitter: float = 0.1, angle_jitter_deg: float = 5.0) -> list[ViewPair]:
    """Pairs on the 90-degree front lattice with independent per-view zoom and angle jitter.

    Draws the lattice phase exactly as ``build_pairs`` does, so zero jitter reproduces it.
    """
    rig = rig or sample_rig(rng.fork("rig"))
    lo, hi = ELEVATION_RANGE

    def jitter(base: Camera) -> Camera:
        s = float(rng.uniform_range(1.0 - scale_jitter, 1.0 + scale_jitter))
        da = float(rng.uniform_range(-angle_jitter_deg, angle_jitter_deg))
        de = float(rng.uniform_range(-angle_jitter_deg, angle_jitter_deg))
        return Camera((base.azimuth + da) % 360.0, float(np.clip(base.elevation + de, lo, hi)), base.scale * s)

    out = []
    for k, az in enumerate(front_azimuths(rng, spacing_deg)):
        base = Camera(az, rig.elevation, rig.scale)
        front, back = jitter(base), jitter(base.opposite())
        out.append(_pair(asset, front, back, asset_id, f"{asset_id}/perturbed/{k}", size, step))
    return out


def in_front_cone(camera: Camera, cone_deg: float) -> bool:
    return abs(wrap_degrees(camera.azimuth)) <= cone_deg
