"""Keyed counter-based random streams.

Every random number used by the estimators is a pure function of
``(seed, path..., index, draw)``, so results do not depend on the order in
which subjects, replicates or permutations are processed. Streams are
addressed by a path of labels::

    root = KeyedStream(2024)
    s = root.child("mc", "M1", 0)      # one stream per (mediator, level)
    z = s.normal(subject_ids, 100)     # (n, 100) standard normals

Bits come from the SplitMix64 finalizer applied to the stream key mixed
with the counters, evaluated elementwise in numpy.
"""
from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_GOLDEN2 = 0xD1B54A32D192ED03


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _label_to_int(label) -> int:
    if isinstance(label, (bool, np.bool_)):
        return int(label)
    if isinstance(label, (int, np.integer)):
        return int(label) & _MASK
    digest = hashlib.blake2b(str(label).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class KeyedStream:
    """A deterministic stream identified by a seed and a path of labels."""

    __slots__ = ("seed", "path", "key")

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        key = _mix_int(self.seed ^ _GOLDEN)
        for label in self.path:
            key = _mix_int(key + _GOLDEN * (_label_to_int(label) + 1))
        self.key = key

    def __repr__(self):
        return f"KeyedStream(seed={self.seed}, path={self.path!r})"

    def __eq__(self, other):
        return isinstance(other, KeyedStream) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    def child(self, *labels) -> "KeyedStream":
        return KeyedStream(self.seed, self.path + labels)

    def bits(self, index, draws: int | None = None) -> np.ndarray:
        """Raw 64-bit words; shape ``(len(index),)`` or ``(len(index), draws)``."""
        idx = np.asarray(index, dtype=np.int64).astype(np.uint64)
        with np.errstate(over="ignore"):
            h = _mix(idx * np.uint64(_GOLDEN) + np.uint64(self.key))
            if draws is None:
                return _mix(h + np.uint64(_GOLDEN2))
            k = np.arange(1, draws + 1, dtype=np.uint64) * np.uint64(_GOLDEN2)
            return _mix(h[:, None] + k[None, :])

    def uniform(self, index, draws: int | None = None) -> np.ndarray:
        """Uniforms strictly inside (0, 1), on a 2**-52 grid offset by half a step."""
        b = self.bits(index, draws) >> np.uint64(12)
        return (b.astype(np.float64) + 0.5) * 2.0**-52

    def normal(self, index, draws: int | None = None) -> np.ndarray:
        return ndtri(self.uniform(index, draws))

    def integers(self, high: int, size: int) -> np.ndarray:
        """``size`` integers uniform on ``0..high-1`` (counter ``0..size-1``)."""
        u = self.uniform(np.arange(size))
        return np.minimum((u * high).astype(np.int64), high - 1)

    def generator(self) -> np.random.Generator:
        """A numpy Philox generator keyed by this stream, for bulk sequential draws."""
        key = np.array([self.key, _mix_int(self.key + _GOLDEN)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def as_stream(seed_or_stream) -> KeyedStream:
    if isinstance(seed_or_stream, KeyedStream):
        return seed_or_stream
    return KeyedStream(int(seed_or_stream))
