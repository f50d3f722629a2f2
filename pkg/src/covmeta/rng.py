"""Counter-based random streams.

Every stream is a Philox4x64-10 generator keyed by two 64-bit words,
``(seed, stream)``.  The stream word packs a purpose tag into its top 16 bits
and an index (task number, training step, ...) into the low 48 bits, so any
single task or step can be regenerated without replaying the others::

    stream = (purpose << 48) | index

Uniform doubles take the top 53 bits of each raw 64-bit output; normals use
the Box-Muller transform on consecutive uniform pairs.  Both conversions are
fixed here rather than delegated to numpy's ``Generator`` so the streams are
reproducible from the raw Philox output alone.
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
INDEX_BITS = 48

# purpose tags
TASKS = 0
META_DISTRIBUTION = 1
MODEL_INIT = 2
TRAIN_EPS = 3
TRAIN_SHUFFLE = 4
EVAL_EPS = 5

_TWO_PI = 2.0 * math.pi


def stream_word(purpose: int, index: int) -> int:
    if not 0 <= index < (1 << INDEX_BITS):
        raise ValueError(f"stream index {index} out of range")
    return ((purpose & 0xFFFF) << INDEX_BITS) | index


class CounterRng:
    """A Philox stream identified by ``(seed, purpose, index)``."""

    def __init__(self, seed: int, purpose: int = TASKS, index: int = 0):
        self.seed = int(seed) & MASK64
        self.stream = stream_word(purpose, index)
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """``n`` doubles in ``[low, high)``."""
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        if low == 0.0 and high == 1.0:
            return u
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normal draws (Box-Muller, cosine branch first)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = _TWO_PI * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n]

    def exponential(self, n: int) -> np.ndarray:
        return -np.log1p(-self.uniform(n))

    def categorical(self, weights) -> int:
        w = np.asarray(weights, dtype=np.float64)
        u = self.uniform(1)[0] * w.sum()
        idx = int(np.searchsorted(np.cumsum(w), u, side="right"))
        return min(idx, len(w) - 1)

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort of uniforms: ties are astronomically unlikely and still ordered
        return np.argsort(self.uniform(n), kind="stable")
