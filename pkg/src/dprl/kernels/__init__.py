"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``DPRL_DISABLE_NUMBA=1``
(or run without numba installed) to force the numpy implementations; both
backends are importable as ``numpy_backend`` / ``numba_backend`` for
equivalence tests and benchmarks.
"""

import os

import numpy as np

from . import _numpy as numpy_backend

try:
    from . import _numba as numba_backend
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_backend = None


def _numba_disabled():
    return os.environ.get("DPRL_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


if numba_backend is not None and not _numba_disabled():
    backend = numba_backend
    BACKEND = "numba"
else:
    backend = numpy_backend
    BACKEND = "numpy"

xoshiro_fill = backend.xoshiro_fill
conv2d_forward = backend.conv2d_forward
conv2d_backward_input = backend.conv2d_backward_input
conv2d_weight_grad = backend.conv2d_weight_grad
conv2d_weight_grad_per_example = backend.conv2d_weight_grad_per_example
maxpool_forward = backend.maxpool_forward
maxpool_backward = backend.maxpool_backward
jacobi_sweeps = backend.jacobi_sweeps


def round_robin_schedule(n):
    """Pair ordering for one cyclic Jacobi sweep (circle method).

    Returns an int64 array of shape (rounds, pairs, 2) with p < q in every
    pair; for odd ``n`` the pair that meets the padding slot is (-1, -1).
    Every unordered pair (p, q) appears exactly once per sweep.
    """
    m = n + (n % 2)
    if m < 2:
        return np.zeros((0, 0, 2), dtype=np.int64)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p >= n or q >= n:
                pairs.append((-1, -1))
            else:
                pairs.append((min(p, q), max(p, q)))
        rounds.append(pairs)
        players = [players[0], players[-1]] + players[1:-1]
    return np.asarray(rounds, dtype=np.int64)
