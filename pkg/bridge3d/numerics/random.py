"""Counter-based random stream: splitmix64 over (seed, counter), Box–Muller normals.

Value ``i`` drawn from a stream at counter ``c`` is a pure function of
``(seed, c + i)``, so two streams agree bit for bit on every platform and
disjoint counter ranges never share a draw.
"""
from __future__ import annotations

import hashlib
import typing as t
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, index: int) -> int:
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + np.uint64((index + 1) & _MASK64) * _GOLDEN
        return int(_mix(np.asarray(z, dtype=np.uint64)))


@dataclass
class RandomStream:
    seed: int
    counter: int = 0

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` 64-bit words."""
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            out = _mix(np.uint64(self.seed & _MASK64) + idx * _GOLDEN)
        self.counter += n
        return out

    def uniform(self, shape: int | t.Sequence[int] = ()) -> np.ndarray:
        """float64 in [0, 1) with 53 random bits."""
        n = int(np.prod(shape)) if shape != () else 1
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape)

    def uniform_range(self, lo: float, hi: float, shape: int | t.Sequence[int] = ()) -> np.ndarray:
        return lo + (hi - lo) * self.uniform(shape)

    def integers(self, n: int, size: int | None = None) -> t.Any:
        """Uniform integers in ``[0, n)``."""
        u = self.uniform(() if size is None else size)
        out = np.minimum(np.floor(u * n), n - 1).astype(np.int64)
        return int(out) if size is None else out

    def choice(self, items: t.Sequence[t.Any]) -> t.Any:
        return items[self.integers(len(items))]

    def bernoulli(self, p: float) -> bool:
        return bool(self.uniform() < p)

    def permutation(self, n: int) -> np.ndarray:
        # Fisher–Yates driven by this stream
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def normal(self, shape: int | t.Sequence[int] = ()) -> np.ndarray:
        n = int(np.prod(shape)) if shape != () else 1
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).reshape(-1)
        return z[:n].reshape(shape)

    def fork(self, key: int | str) -> "RandomStream":
        """Independent child stream; does not advance this one."""
        if isinstance(key, str):
            key = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
        return RandomStream(splitmix64(self.seed ^ (key & _MASK64), self.counter))


def gaussian(stream: RandomStream, shape: t.Sequence[int], dtype: t.Any = np.float32) -> Tensor:
    """i.i.d. standard normals drawn from ``stream`` (advances its counter)."""
    return Tensor(stream.normal(tuple(shape)).astype(dtype))
