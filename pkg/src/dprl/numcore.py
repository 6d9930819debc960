"""Deterministic array arithmetic and seeded sampling.

Tensors are plain ``numpy.float32`` arrays. Reductions accumulate in
float64 and round once on the way out. All randomness comes from
:class:`SeededRng`, a xoshiro256** generator seeded through splitmix64,
so a seed reproduces the same stream bit-for-bit on every platform.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import kernels
from .errors import DimensionError, DomainError

FLOAT = np.float32
MASK64 = (1 << 64) - 1
_TWO_POW_M53 = 1.0 / (1 << 53)


def splitmix64(x):
    """One splitmix64 step. Returns ``(new_state, output)`` as Python ints."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


class SeededRng:
    """xoshiro256** stream seeded from a 64-bit integer via splitmix64.

    Single-owner: code that fans out work must :meth:`spawn` children
    rather than share one instance across threads.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        sm = self.seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._state = np.array(words, dtype=np.uint64)

    @property
    def state(self):
        return self._state.copy()

    def next_uint64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            kernels.xoshiro_fill(self._state, out)
        return out

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) built from the top 53 bits of each draw."""
        return (self.next_uint64(n) >> np.uint64(11)).astype(np.float64) * _TWO_POW_M53

    def spawn(self) -> "SeededRng":
        """Child generator seeded from the next parent draw."""
        return SeededRng(int(self.next_uint64(1)[0]))

    def spawn_seed(self) -> int:
        return int(self.next_uint64(1)[0])

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(u[k] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def numpy_generator(self) -> np.random.Generator:
        """A numpy Generator seeded from this stream, for distributions not built here."""
        return np.random.Generator(np.random.PCG64(self.spawn_seed()))


def derive_seed(base: int, index: int) -> int:
    """Seed for sub-stream ``index`` of ``base``; independent of evaluation order."""
    _, out = splitmix64((int(base) ^ (int(index) * 0xD1B54A32D192ED03)) & MASK64)
    return out


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(FLOAT)


def l2_norm(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    return float(np.sqrt(np.sum(v * v)))


def gaussian_sample(rng: SeededRng, n: int, std: float) -> np.ndarray:
    """``n`` i.i.d. N(0, std^2) draws via Box-Muller.

    ``std == 0`` returns zeros without advancing ``rng``.
    """
    if not std >= 0:
        raise DomainError(f"std must be >= 0, got {std}")
    if std == 0 or n == 0:
        return np.zeros(int(n), dtype=FLOAT)
    pairs = (int(n) + 1) // 2
    u = rng.uniform(2 * pairs)
    radius = np.sqrt(-2.0 * np.log(1.0 - u[0::2]))
    angle = 2.0 * math.pi * u[1::2]
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return (z[:n] * std).astype(FLOAT)


def resolve_threads(threads=None) -> int:
    if threads is None:
        env = os.environ.get("DPRL_THREADS", "").strip()
        threads = int(env) if env else 1
    return max(1, int(threads))


def chunked_map(fn, n_items, chunk=256, threads=None):
    """Apply ``fn(start, stop)`` over fixed-size chunks, results in chunk order.

    Chunk boundaries do not depend on the worker count, so any reduction the
    caller performs over the returned list is identical for 1 or N threads.
    """
    bounds = [(s, min(s + chunk, n_items)) for s in range(0, n_items, chunk)]
    threads = resolve_threads(threads)
    if threads == 1 or len(bounds) < 2:
        return [fn(s, e) for s, e in bounds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda se: fn(*se), bounds))
