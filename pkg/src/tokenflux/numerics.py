"""Dense float64 kernels and a portable seeded PRNG.

Everything here works on plain numpy arrays; callers never see a custom
matrix class. Inputs are validated and outputs checked for finiteness.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

_MASK64 = (1 << 64) - 1


class NumericError(ArithmeticError):
    """A kernel produced a non-finite value."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("matmul overflowed")
    return out


def softmax_row(v) -> np.ndarray:
    """Numerically stable softmax of a 1-D score vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("softmax_row needs a non-empty 1-D vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax_row input contains non-finite values")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row-wise softmax that tolerates ``-inf`` entries (masked logits)."""
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def cosine_sim(u, v, return_flag: bool = False):
    """Cosine similarity clamped to [-1, 1].

    A zero-norm argument yields 0.0 instead of raising; with
    ``return_flag=True`` the result is ``(sim, degenerate)``.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.size} vs {v.size}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        if not return_flag:
            warnings.warn("cosine_sim on a zero-norm vector; returning 0", RuntimeWarning, stacklevel=2)
        return (0.0, True) if return_flag else 0.0
    sim = float(np.dot(u, v)) / (nu * nv)
    sim = min(1.0, max(-1.0, sim))
    return (sim, False) if return_flag else sim


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between rows of ``a`` and ``b``.

    Rows with zero norm get similarity 0 against everything.
    """
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    sa = np.where(na > 0, na, 1.0)
    sb = np.where(nb > 0, nb, 1.0)
    sims = (a / sa[:, None]) @ (b / sb[:, None]).T
    return np.clip(sims, -1.0, 1.0)


class SeededRng:
    """SplitMix64 generator; identical seeds give identical streams everywhere."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Float in [0, 1) built from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def normal(self) -> float:
        # Box-Muller; one draw per call keeps the stream position simple.
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def u64_array(self, n: int) -> np.ndarray:
        """Next ``n`` outputs at once; same values as ``n`` calls to next_u64."""
        # Each output depends only on its own counter value, so the stream vectorizes.
        ks = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + ks * np.uint64(0x9E3779B97F4A7C15)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * 0x9E3779B97F4A7C15) & _MASK64
        return z

    def uniform_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return ((self.u64_array(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))).reshape(shape)

    def normal_array(self, shape) -> np.ndarray:
        """Standard normals; element k consumes the same two draws as the k-th ``normal()``."""
        n = int(np.prod(shape))
        u = self.uniform_array((n, 2))
        u1 = 1.0 - u[:, 0]
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[:, 1])).reshape(shape)
