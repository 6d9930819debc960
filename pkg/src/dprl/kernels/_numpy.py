"""Pure-numpy implementations of the hot kernels.

Every function here has a twin in ``_numba`` with the same signature and
the same floating-point operation order where the algorithm allows it.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MASK64 = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


def xoshiro_fill(state, out):
    """Fill ``out`` (uint64) with xoshiro256** outputs, advancing ``state`` in place."""
    s0, s1, s2, s3 = (int(v) for v in state)
    buf = [0] * out.size
    for i in range(out.size):
        buf[i] = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    out[:] = np.array(buf, dtype=np.uint64)
    state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)
    return out


def conv2d_forward(x, w, b):
    # x (n,C,H,W), w (O,C,k,k) -> (n,O,H-k+1,W-k+1)
    k = w.shape[2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def conv2d_backward_input(delta, w):
    k = w.shape[2]
    pad = np.pad(delta, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    win = sliding_window_view(pad, (k, k), axis=(2, 3))
    dx = np.tensordot(win, w[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3]))
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def conv2d_weight_grad(x, delta):
    k = x.shape[2] - delta.shape[2] + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return np.tensordot(delta, win, axes=([0, 2, 3], [0, 2, 3]))


def conv2d_weight_grad_per_example(x, delta):
    k = x.shape[2] - delta.shape[2] + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("nohw,nchwij->nocij", delta, win, optimize=True)


def maxpool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    blocks = x[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(delta, idx, in_shape):
    n, c, h, w = in_shape
    h2, w2 = idx.shape[2], idx.shape[3]
    blocks = np.zeros((n, c, h2, w2, 4), dtype=delta.dtype)
    np.put_along_axis(blocks, idx[..., None], delta[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(in_shape, dtype=delta.dtype)
    dx[:, :, : 2 * h2, : 2 * w2] = blocks.reshape(n, c, 2 * h2, 2 * w2)
    return dx


def _off_norm(a):
    off = a.copy()
    np.fill_diagonal(off, 0.0)
    return np.sqrt(np.sum(off * off))


def jacobi_sweeps(a, schedule, tol_abs, max_sweeps):
    """Round-robin cyclic Jacobi on ``a`` in place.

    Returns the number of sweeps used, or -1 if ``max_sweeps`` was exhausted.
    Pairs within a round are disjoint, so each round rotates all of them at once.
    """
    for sweep in range(max_sweeps + 1):
        if _off_norm(a) < tol_abs:
            return sweep
        if sweep == max_sweeps:
            return -1
        for rnd in schedule:
            valid = rnd[:, 0] >= 0
            p, q = rnd[valid, 0], rnd[valid, 1]
            apq = a[p, q]
            nz = apq != 0.0
            p, q, apq = p[nz], q[nz], apq[nz]
            if p.size == 0:
                continue
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            sgn = np.where(tau >= 0.0, 1.0, -1.0)
            big = np.abs(tau) > 1e150
            safe = np.where(big, 0.0, tau)
            t = np.where(big, 0.5 / np.where(big, tau, 1.0), sgn / (np.abs(safe) + np.sqrt(1.0 + safe * safe)))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            ap = a[p, :].copy()
            aq = a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            ap = a[:, p].copy()
            aq = a[:, q].copy()
            a[:, p] = ap * c - aq * s
            a[:, q] = ap * s + aq * c
            a[p, q] = 0.0
            a[q, p] = 0.0
    return -1
