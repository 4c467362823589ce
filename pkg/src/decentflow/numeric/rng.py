"""Counter-based random streams.

A stream is the pair ``(seed, stream_id)`` plus a position ``counter``.  Word
``i`` of a stream is a keyed hash of ``i``, so any position can be produced
without generating the ones before it, and workers can derive their own
streams from a label string with no coordination.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / float(1 << 53)


def label_id(label: str) -> int:
    """Stable 64-bit id for a stream label such as ``"expert/3/noise"``."""
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _mix_int(v: int) -> int:
    return int(_mix(np.array([v & _MASK], dtype=np.uint64))[0])


@dataclass
class RngStream:
    seed: int
    stream_id: int
    counter: int = 0

    @classmethod
    def from_label(cls, seed: int, label: str, counter: int = 0) -> "RngStream":
        return cls(seed & _MASK, label_id(label), counter)

    def child(self, label: str) -> "RngStream":
        """Independent stream keyed by this stream's key and ``label``."""
        return RngStream(self.seed, _mix_int(self.stream_id ^ label_id(label)), 0)

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)

    def _keys(self) -> tuple[np.uint64, np.uint64]:
        a = _mix_int((self.seed * 0xD1B54A32D192ED03) ^ self.stream_id)
        b = _mix_int(self.stream_id + (self.seed ^ 0x5851F42D4C957F2D))
        return np.uint64(a), np.uint64(b)

    def words(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words; advances the counter by ``n``."""
        ka, kb = self._keys()
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _mix(_mix(idx * _GOLDEN + ka) ^ kb)


def uniform(stream: RngStream, size: int | tuple[int, ...], low: float = 0.0, high: float = 1.0) -> np.ndarray:
    shape = (size,) if isinstance(size, int) else tuple(size)
    n = int(np.prod(shape)) if shape else 1
    u = (stream.words(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return (low + (high - low) * u).reshape(shape)


def normal(stream: RngStream, shape: int | tuple[int, ...]) -> np.ndarray:
    """Standard normals by Box-Muller; each value consumes two words."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    n = int(np.prod(shape)) if shape else 1
    w = stream.words(2 * n).reshape(n, 2) >> np.uint64(11)
    u1 = (w[:, 0].astype(np.float64) + 1.0) * _INV_2_53
    u2 = w[:, 1].astype(np.float64) * _INV_2_53
    return (np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)).reshape(shape)


def gaussian(stream: RngStream, shape) -> Tensor:
    return Tensor(normal(stream, shape))


def permutation(stream: RngStream, n: int) -> np.ndarray:
    return np.argsort(stream.words(n), kind="stable")


def choice(stream: RngStream, weights: np.ndarray) -> int:
    """Index drawn with probability proportional to ``weights``."""
    cdf = np.cumsum(weights)
    total = cdf[-1]
    u = float(uniform(stream, 1)[0]) * total
    i = int(np.searchsorted(cdf, u, side="right"))
    return min(i, len(weights) - 1)
