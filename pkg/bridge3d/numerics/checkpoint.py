"""K3CKPT v1 binary checkpoints.

Layout (little-endian)::

    b"K3CK" | u32 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype (0=f32, 1=f64) | u8 rank
              | rank x u32 extent | row-major payload )
    u32 meta_len | meta JSON (utf-8, sorted keys)

The entry encoding is shared with the hidden-state cache.
"""
from __future__ import annotations

import json
import os
import struct
import typing as t

import numpy as np

from ..errors import FormatError

MAGIC = b"K3CK"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def pack_entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise FormatError(f"entry {name!r}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes()


class Reader:
    """Cursor over a bytes buffer raising FormatError on truncation."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def entry(self) -> tuple[str, np.ndarray]:
        (name_len,) = self.unpack("<H")
        name = self.take(name_len).decode("utf-8")
        tag, rank = self.unpack("<BB")
        dtype = _TAG_DTYPES.get(tag)
        if dtype is None:
            raise FormatError(f"{self.what}: entry {name!r} has unknown dtype tag {tag}")
        shape = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        payload = self.take(count * dtype.itemsize)
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
        return name, arr.astype(dtype.newbyteorder("="), copy=True)

    def done(self) -> bool:
        return self.pos == len(self.buf)


def check_header(reader: Reader, magic: bytes, version: int) -> None:
    got = reader.take(len(magic))
    if got != magic:
        raise FormatError(f"{reader.what}: bad magic {got!r}, expected {magic!r}")
    (ver,) = reader.unpack("<I")
    if ver != version:
        raise FormatError(f"{reader.what}: unsupported version {ver} (expected {version})")


def atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def dump_checkpoint(entries: t.Mapping[str, np.ndarray], meta: t.Mapping[str, t.Any] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name in entries:
        parts.append(pack_entry(name, entries[name]))
    blob = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


def parse_checkpoint(buf: bytes, what: str = "K3CKPT") -> tuple[dict[str, np.ndarray], dict[str, t.Any]]:
    reader = Reader(buf, what)
    check_header(reader, MAGIC, VERSION)
    (count,) = reader.unpack("<I")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, arr = reader.entry()
        if name in entries:
            raise FormatError(f"{what}: duplicate entry {name!r}")
        entries[name] = arr
    meta: dict[str, t.Any] = {}
    if not reader.done():
        (meta_len,) = reader.unpack("<I")
        try:
            meta = json.loads(reader.take(meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{what}: unreadable metadata trailer") from exc
    if not reader.done():
        raise FormatError(f"{what}: {len(buf) - reader.pos} trailing bytes")
    return entries, meta


def save_checkpoint(path: str, entries: t.Mapping[str, np.ndarray], meta: t.Mapping[str, t.Any] | None = None) -> None:
    atomic_write(path, dump_checkpoint(entries, meta))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, t.Any]]:
    with open(path, "rb") as f:
        buf = f.read()
    return parse_checkpoint(buf, what=f"K3CKPT {path}")


def save_module(path: str, module: t.Any, meta: t.Mapping[str, t.Any],
                group_of: t.Callable[[str], str] = lambda name: "backbone") -> None:
    """Write a module's parameters as ``group/name`` entries; groups are listed in the trailer."""
    entries = {f"{group_of(name)}/{name}": p.data for name, p in module.named_parameters()}
    groups = sorted({key.split("/", 1)[0] for key in entries})
    save_checkpoint(path, entries, {**meta, "groups": groups})


def module_state(entries: t.Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Inverse of the ``group/name`` prefixing done by ``save_module``."""
    return {key.split("/", 1)[1]: arr for key, arr in entries.items()}


def expect_kind(meta: t.Mapping[str, t.Any], kind: str, path: str) -> None:
    if meta.get("kind") != kind:
        raise FormatError(f"{path}: checkpoint kind {meta.get('kind')!r}, expected {kind!r}")
