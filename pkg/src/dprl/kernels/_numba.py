"""numba-compiled kernels; see ``_numpy`` for the reference semantics."""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def xoshiro_fill(state, out):
    s0 = state[0]
    s1 = state[1]
    s2 = state[2]
    s3 = state[3]
    for i in range(out.size):
        out[i] = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[0] = s0
    state[1] = s1
    state[2] = s2
    state[3] = s3
    return out


@njit(cache=True)
def conv2d_forward(x, w, b):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho, wo = h - k + 1, wd - k + 1
    out = np.empty((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for i in range(k):
                            for j in range(k):
                                acc += w[o, c, i, j] * x[s, c, y + i, xx + j]
                    out[s, o, y, xx] = acc + b[o]
    return out


@njit(cache=True)
def conv2d_backward_input(delta, w):
    n, cout, ho, wo = delta.shape
    _, cin, k, _ = w.shape
    dx = np.zeros((n, cin, ho + k - 1, wo + k - 1))
    for s in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    d = delta[s, o, y, xx]
                    if d == 0.0:
                        continue
                    for c in range(cin):
                        for i in range(k):
                            for j in range(k):
                                dx[s, c, y + i, xx + j] += d * w[o, c, i, j]
    return dx


@njit(cache=True)
def conv2d_weight_grad_per_example(x, delta):
    n, cin, h, _ = x.shape
    _, cout, ho, wo = delta.shape
    k = h - ho + 1
    g = np.zeros((n, cout, cin, k, k))
    for s in range(n):
        for o in range(cout):
            for c in range(cin):
                for i in range(k):
                    for j in range(k):
                        acc = 0.0
                        for y in range(ho):
                            for xx in range(wo):
                                acc += delta[s, o, y, xx] * x[s, c, y + i, xx + j]
                        g[s, o, c, i, j] = acc
    return g


@njit(cache=True)
def conv2d_weight_grad(x, delta):
    g = conv2d_weight_grad_per_example(x, delta)
    out = np.zeros(g.shape[1:])
    for s in range(g.shape[0]):
        out += g[s]
    return out


@njit(cache=True)
def maxpool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    out = np.empty((n, c, h2, w2))
    idx = np.empty((n, c, h2, w2), dtype=np.int64)
    for s in range(n):
        for ch in range(c):
            for y in range(h2):
                for xx in range(w2):
                    best = x[s, ch, 2 * y, 2 * xx]
                    arg = 0
                    for t in range(1, 4):
                        v = x[s, ch, 2 * y + t // 2, 2 * xx + t % 2]
                        if v > best:
                            best = v
                            arg = t
                    out[s, ch, y, xx] = best
                    idx[s, ch, y, xx] = arg
    return out, idx


@njit(cache=True)
def maxpool_backward(delta, idx, in_shape):
    dx = np.zeros(in_shape)
    n, c, h2, w2 = idx.shape
    for s in range(n):
        for ch in range(c):
            for y in range(h2):
                for xx in range(w2):
                    t = idx[s, ch, y, xx]
                    dx[s, ch, 2 * y + t // 2, 2 * xx + t % 2] = delta[s, ch, y, xx]
    return dx


@njit(cache=True)
def _off_norm(a):
    n = a.shape[0]
    acc = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                acc += a[i, j] * a[i, j]
    return math.sqrt(acc)


@njit(cache=True)
def jacobi_sweeps(a, schedule, tol_abs, max_sweeps):
    n = a.shape[0]
    npairs = schedule.shape[1]
    cs = np.empty(npairs)
    sn = np.empty(npairs)
    active = np.zeros(npairs, dtype=np.bool_)
    for sweep in range(max_sweeps + 1):
        if _off_norm(a) < tol_abs:
            return sweep
        if sweep == max_sweeps:
            return -1
        for r in range(schedule.shape[0]):
            for k in range(npairs):
                p = schedule[r, k, 0]
                q = schedule[r, k, 1]
                active[k] = False
                if p < 0:
                    continue
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau
                else:
                    sgn = 1.0 if tau >= 0.0 else -1.0
                    t = sgn / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                cs[k] = c
                sn[k] = t * c
                active[k] = True
            for k in range(npairs):
                if not active[k]:
                    continue
                p = schedule[r, k, 0]
                q = schedule[r, k, 1]
                c = cs[k]
                s = sn[k]
                for j in range(n):
                    ap = a[p, j]
                    aq = a[q, j]
                    a[p, j] = c * ap - s * aq
                    a[q, j] = s * ap + c * aq
            for k in range(npairs):
                if not active[k]:
                    continue
                p = schedule[r, k, 0]
                q = schedule[r, k, 1]
                c = cs[k]
                s = sn[k]
                for i in range(n):
                    ap = a[i, p]
                    aq = a[i, q]
                    a[i, p] = ap * c - aq * s
                    a[i, q] = ap * s + aq * c
            for k in range(npairs):
                if active[k]:
                    a[schedule[r, k, 0], schedule[r, k, 1]] = 0.0
                    a[schedule[r, k, 1], schedule[r, k, 0]] = 0.0
    return -1
