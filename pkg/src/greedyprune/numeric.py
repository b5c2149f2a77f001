"""Dense arithmetic helpers and the seeded random stream.

Matrices are plain ``float64`` numpy arrays. The random stream wraps numpy's
PCG64 bit generator, whose output is specified bit-for-bit and therefore
identical on every platform for a given seed.
"""

from __future__ import annotations

import hashlib

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")


class RngStream:
    """Single-owner deterministic random stream.

    ``child`` derives an independent stream from this seed plus a tuple of
    integer/str tags, so every consumer (data, init of width ``n``, ...) gets
    its own reproducible sequence regardless of call order elsewhere.
    """

    def __init__(self, seed: int, tags: tuple = ()):
        self.seed = int(seed)
        self.tags = tuple(tags)
        words = [self.seed & 0xFFFFFFFFFFFFFFFF] + [_tag_word(t) for t in self.tags]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

    def child(self, *tags) -> "RngStream":
        return RngStream(self.seed, self.tags + tuple(tags))

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def gauss(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low, high=None, size=None):
        """Integers in ``[low, high)``, elementwise when given arrays."""
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, tags={self.tags})"


def _tag_word(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    # stable across processes, unlike hash()
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def sample_matrix(rng: RngStream, rows: int, cols: int, dist: str = "gauss01") -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError(f"sample_matrix needs positive shape, got {rows}x{cols}")
    if dist == "uniform01":
        return rng.uniform((rows, cols))
    if dist == "gauss01":
        return rng.gauss((rows, cols))
    raise ValueError(f"unknown distribution {dist!r}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def elementwise(op: str, m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if op == "relu":
        return np.maximum(m, 0.0)
    if op == "tanh":
        return np.tanh(m)
    if op == "relu_grad":
        # derivative at exactly 0 is taken as 0
        return (m > 0).astype(np.float64)
    if op == "linear":
        return m.copy()
    if op == "linear_grad":
        return np.ones_like(m)
    if op == "tanh_grad":
        t = np.tanh(m)
        return 1.0 - t * t
    raise ValueError(f"unknown elementwise op {op!r}")


def activate(name: str, pre: np.ndarray) -> np.ndarray:
    return elementwise(name, pre)


def activate_grad(name: str, pre: np.ndarray) -> np.ndarray:
    return elementwise(name + "_grad", pre)
