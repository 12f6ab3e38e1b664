"""K3IMG and K3VOX binary file formats (little-endian)."""
from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError
from ..numerics.checkpoint import Reader, atomic_write

IMG_MAGIC = b"K3IM"
VOX_MAGIC = b"K3VX"


def dump_image(image: np.ndarray) -> bytes:
    """[channels, height, width] float32 planes."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise FormatError(f"K3IMG expects [C, H, W], got shape {image.shape}")
    c, h, w = image.shape
    return IMG_MAGIC + struct.pack("<HHB", w, h, c) + image.astype("<f4").tobytes()


def parse_image(buf: bytes, what: str = "K3IMG") -> np.ndarray:
    r = Reader(buf, what)
    magic = r.take(4)
    if magic != IMG_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}, expected {IMG_MAGIC!r}")
    w, h, c = r.unpack("<HHB")
    planes = np.frombuffer(r.take(4 * w * h * c), dtype="<f4").reshape(c, h, w)
    if not r.done():
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes")
    return planes.astype(np.float32)


def dump_voxels(grid: np.ndarray) -> bytes:
    grid = np.asarray(grid, dtype=bool)
    if grid.ndim != 3:
        raise FormatError(f"K3VOX expects a 3D grid, got shape {grid.shape}")
    nx, ny, nz = grid.shape
    bits = np.packbits(grid.transpose(2, 1, 0).reshape(-1), bitorder="little")
    return VOX_MAGIC + struct.pack("<HHH", nx, ny, nz) + bits.tobytes()


def parse_voxels(buf: bytes, what: str = "K3VOX") -> np.ndarray:
    r = Reader(buf, what)
    magic = r.take(4)
    if magic != VOX_MAGIC:
        raise FormatError(f"{what}: bad magic {magic!r}, expected {VOX_MAGIC!r}")
    nx, ny, nz = r.unpack("<HHH")
    n = nx * ny * nz
    packed = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
    if not r.done():
        raise FormatError(f"{what}: {len(buf) - r.pos} trailing bytes")
    flat = np.unpackbits(packed, count=n, bitorder="little").astype(bool)
    return flat.reshape(nz, ny, nx).transpose(2, 1, 0).copy()


def write_image(path: str, image: np.ndarray) -> None:
    atomic_write(path, dump_image(image))


def read_image(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_image(f.read(), what=f"K3IMG {path}")


def write_voxels(path: str, grid: np.ndarray) -> None:
    atomic_write(path, dump_voxels(grid))


def read_voxels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_voxels(f.read(), what=f"K3VOX {path}")
