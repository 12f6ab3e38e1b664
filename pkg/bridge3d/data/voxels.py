"""Procedural voxel assets with a back component sealed inside a rear cavity.

Canonical frame: grid index (x, y, z), y up, the canonical front camera looks
along +z (it sees the z-minimal faces first). The body is a closed box shell
whose rear wall is missing; the cavity it forms opens towards +z, and the back
component lives strictly inside it (z >= center). A ray entering from the
front hemisphere hits the closed front wall before it can reach the cavity, so
the component never changes a front render.
"""
from __future__ import annotations

import typing as t
from dataclasses import dataclass, field

import numpy as np

from ..config_store import COMPONENT_CLASSES
from ..errors import ContractError
from ..numerics.random import RandomStream

SIZES = ("small", "large")
WALL = 2


@dataclass
class BodyParams:
    half_width: int
    half_height: int
    front_depth: int
    back_depth: int
    front_thickness: int
    decoration: int


@dataclass
class VoxelAsset:
    grid: np.ndarray
    back_component: str
    size_variant: str | None
    front_decoration: int
    seed: int
    component_mask: np.ndarray = field(repr=False)

    @property
    def extent(self) -> int:
        return self.grid.shape[0]

    def body(self) -> np.ndarray:
        return self.grid & ~self.component_mask


def _sample_body(rng: RandomStream) -> BodyParams:
    return BodyParams(
        half_width=int(rng.choice([6, 7, 8])),
        half_height=int(rng.choice([6, 7, 8])),
        front_depth=int(rng.choice([5, 6, 7])),
        back_depth=int(rng.choice([7, 8])),
        front_thickness=int(rng.choice([2, 3])),
        decoration=int(rng.integers(4)),
    )


def _body(g: int, b: BodyParams) -> tuple[np.ndarray, tuple[slice, slice, slice]]:
    c = g // 2
    x0, x1 = c - b.half_width, c + b.half_width - 1
    y0, y1 = c - b.half_height, c + b.half_height - 1
    z0, z1 = c - b.front_depth, c + b.back_depth - 1
    grid = np.zeros((g, g, g), dtype=bool)
    grid[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1] = True
    # hollow out everything behind the front wall; the cavity is open at the back face
    cavity = (slice(x0 + WALL, x1 - WALL + 1), slice(y0 + WALL, y1 - WALL + 1),
              slice(c, z1 + 1))
    hollow = (cavity[0], cavity[1], slice(z0 + b.front_thickness, z1 + 1))
    grid[hollow] = False
    # decoration on the outer face of the front wall
    if b.decoration == 1:
        grid[c - 1:c + 1, c - 1:c + 1, z0 - 1] = True
    elif b.decoration == 2:
        grid[x0 + 1:x1, c - 1:c + 1, z0 - 1] = True
    elif b.decoration == 3:
        grid[c - 1:c + 1, y0 + 1:y1, z0 - 1] = True
    return grid, cavity


def _component(g: int, cavity: tuple[slice, slice, slice], kind: str, large: bool) -> np.ndarray:
    """Component voxels, all within the cavity box (z >= grid center)."""
    cx, cy, cz = cavity
    xs, ys = np.arange(cx.start, cx.stop), np.arange(cy.start, cy.stop)
    zs = np.arange(cz.start, cz.stop)
    mask = np.zeros((g, g, g), dtype=bool)
    mx, my = (cx.start + cx.stop - 1) / 2.0, (cy.start + cy.stop - 1) / 2.0
    z_front = zs[0]
    depth = len(zs)
    if kind == "slab":
        # horizontal shelf spanning the cavity width, touching both side walls
        thick = 2 if large else 1
        length = depth if large else max(2, depth // 2)
        y_mid = int(np.floor(my))
        mask[cx, y_mid - thick + 1:y_mid + 1, z_front:z_front + length] = True
    elif kind == "spike":
        # tapered square pyramid pointing out of the cavity
        length = min(7 if large else 4, depth)
        for i in range(length):
            r = max(0, (2 if large else 1) - (i * (3 if large else 2)) // length)
            x_lo, x_hi = int(np.floor(mx)) - r, int(np.ceil(mx)) + r
            y_lo, y_hi = int(np.floor(my)) - r, int(np.ceil(my)) + r
            mask[x_lo:x_hi + 1, y_lo:y_hi + 1, z_front + i] = True
    elif kind == "wings":
        # plates lining both side walls
        height = len(ys) if large else max(2, len(ys) // 2)
        length = depth if large else max(2, depth // 2)
        y_lo = int(np.floor(my)) - height // 2 + 1
        for x in (xs[0], xs[-1]):
            mask[x, max(ys[0], y_lo):min(ys[-1], y_lo + height - 1) + 1, z_front:z_front + length] = True
    elif kind == "handle":
        # two posts running back from the cavity front plane, joined by a bar
        reach = min(5 if large else 3, depth)
        gap = 3 if large else 2
        y_post = int(np.floor(my))
        xa, xb = int(np.floor(mx)) - gap, int(np.ceil(mx)) + gap
        thick = 2 if large else 1
        for x in (xa, xb):
            mask[x, y_post - thick + 1:y_post + 1, z_front:z_front + reach] = True
        mask[xa:xb + 1, y_post - thick + 1:y_post + 1, z_front + reach - 1] = True
    elif kind != "none":
        raise ContractError(f"unknown back component {kind!r}")
    inside = np.zeros_like(mask)
    inside[cavity] = True
    return mask & inside


def make_asset(seed: int, spec: tuple[str, str | None] | str = "random",
               grid: int = 32, classes: t.Sequence[str] = COMPONENT_CLASSES) -> VoxelAsset:
    """Deterministic asset for (seed, spec); spec is ``(class, size)`` or ``"random"``."""
    root = RandomStream(seed)
    if spec == "random":
        comp_rng = root.fork("component")
        kind = str(comp_rng.choice(list(classes)))
        size = None if kind == "none" else str(comp_rng.choice(SIZES))
    else:
        kind, size = spec  # type: ignore[misc]
        if kind not in COMPONENT_CLASSES:
            raise ContractError(f"unknown back component {kind!r}")
        if kind == "none":
            size = None
        elif size not in SIZES:
            raise ContractError(f"component {kind!r} needs a size in {SIZES}, got {size!r}")
    if grid < 32:
        raise ContractError(f"asset grid must be at least 32, got {grid}")
    params = _sample_body(root.fork("body"))
    body, cavity = _body(grid, params)
    comp = _component(grid, cavity, kind, size == "large")
    return VoxelAsset(grid=body | comp, back_component=kind, size_variant=size,
                      front_decoration=params.decoration, seed=seed, component_mask=comp)


def rear_half(extent: int) -> np.ndarray:
    """Boolean mask of voxels with z >= center in the canonical frame."""
    mask = np.zeros((extent,) * 3, dtype=bool)
    mask[:, :, extent // 2:] = True
    return mask
