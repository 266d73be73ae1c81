"""Dense 2-D float64 kernels and a caller-owned seeded generator.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and ndim 2.
The functions here add the shape checks and numeric guarantees the rest of
the package relies on; they never broadcast.
"""
from __future__ import annotations

import hashlib

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value reached a kernel that requires finite input."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


def eye(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def softmax_rows(a) -> np.ndarray:
    """Row-wise softmax with max subtraction; every row sums to one."""
    a = as_matrix(a)
    if not np.all(np.isfinite(a)):
        raise NumericError("softmax_rows received non-finite input")
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def elementwise(a, b, op: str) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if op not in _OPS:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_OPS)}")
    if a.shape != b.shape:
        raise ShapeError(f"elementwise {op} on mismatched shapes {a.shape} and {b.shape}")
    return _OPS[op](a, b)


def add(a, b) -> np.ndarray:
    return elementwise(a, b, "add")


def sub(a, b) -> np.ndarray:
    return elementwise(a, b, "sub")


def mul(a, b) -> np.ndarray:
    return elementwise(a, b, "mul")


def scale(a, s: float) -> np.ndarray:
    return as_matrix(a) * float(s)


class SeededRng:
    """Explicit, splittable pseudo-random stream.

    Backed by PCG64 seeded through a ``SeedSequence``; ``child(*keys)``
    derives an independent stream whose state depends only on the parent
    seed and the keys, never on how much the parent has been consumed.
    """

    def __init__(self, seed: int = 0, _keys: tuple = ()):
        self.seed = int(seed)
        self.keys = tuple(_keys)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.keys)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys) -> "SeededRng":
        return SeededRng(self.seed, self.keys + tuple(_key_to_int(k) for k in keys))

    def uniform(self, lo: float, hi: float, size=None):
        return self._gen.uniform(lo, hi, size)

    def normal(self, loc: float = 0.0, std: float = 1.0, size=None):
        return self._gen.normal(loc, std, size)

    def integers(self, lo: int, hi: int, size=None):
        """Integers in ``[lo, hi)``."""
        return self._gen.integers(lo, hi, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace: bool = True):
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, keys={self.keys})"


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("rng keys must be non-negative")
        return int(key)
    # stable across processes, unlike hash()
    return int.from_bytes(hashlib.sha256(str(key).encode("utf-8")).digest()[:8], "little")


def rng_matrix(rng: SeededRng, rows: int, cols: int, lo: float, hi: float) -> np.ndarray:
    """``rows x cols`` matrix of i.i.d. uniform draws in ``[lo, hi)``."""
    if not lo < hi:
        raise ValueError(f"rng_matrix requires lo < hi, got lo={lo}, hi={hi}")
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {rows}x{cols}")
    return rng.uniform(lo, hi, (rows, cols))
