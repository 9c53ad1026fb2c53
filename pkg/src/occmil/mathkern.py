"""Dense float64 kernels and the splitmix64 random stream.

Every stochastic decision in the package draws from a :class:`Prng`; there
is no other entropy source.
"""
from __future__ import annotations

import enum
import math

import numpy as np

from .errors import DimMismatch, EmptyInput

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


class Prng:
    """splitmix64 generator.

    Mutable for convenience; use :func:`prng_next` for the value-style API.
    Independent streams come from :meth:`derive`, never from sharing one
    instance across consumers.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def __repr__(self):
        return f"Prng(0x{self.state:016x})"

    def copy(self) -> "Prng":
        return Prng(self.state)

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix(self.state)

    def u64s(self, n: int) -> np.ndarray:
        """The next ``n`` outputs, identical to ``n`` calls of next_u64."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            out = _mix_array(states)
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Uniforms in [0, 1) with 53 bits of resolution."""
        return (self.u64s(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def gauss(self, n: int) -> np.ndarray:
        """Standard normals, Box-Muller (cosine branch) on successive uniform pairs."""
        u = self.uniform(2 * n).reshape(n, 2)
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        return radius * np.cos(2.0 * math.pi * u[:, 1])

    def integers(self, n: int, high: int) -> np.ndarray:
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def derive(self, tag: int) -> "Prng":
        """Substream keyed by ``tag``; does not advance this generator."""
        return Prng(_mix(((self.state ^ (int(tag) & MASK64)) + GOLDEN_GAMMA) & MASK64))


def prng_next(p: Prng) -> tuple[int, Prng]:
    q = p.copy()
    return q.next_u64(), q


def affine(W: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``W.T @ x + b`` with weights stored input x output."""
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or np.shape(b) != (W.shape[1],):
        raise DimMismatch(f"affine: W {W.shape}, b {np.shape(b)}, x {x.shape}")
    return x @ W + b


def softmax_stable(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("softmax of an empty vector")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Activation(enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


def activate(kind: Activation, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if kind is Activation.RELU:
        return np.maximum(v, 0.0)
    if kind is Activation.TANH:
        return np.tanh(v)
    return sigmoid(v)
