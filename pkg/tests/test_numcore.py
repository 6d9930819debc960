import math

import numpy as np
import pytest

from dprl import kernels
from dprl.errors import DimensionError, DomainError
from dprl.numcore import (FLOAT, SeededRng, chunked_map, derive_seed, gaussian_sample, l2_norm, matmul,
                          resolve_threads, splitmix64)

MASK = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK


def reference_xoshiro(seed, n):
    """Straight transcription of xoshiro256** seeded by splitmix64, Python ints only."""
    s, sm = [], seed
    for _ in range(4):
        sm = (sm + 0x9E3779B97F4A7C15) & MASK
        z = sm
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        s.append(z ^ (z >> 31))
    out = []
    for _ in range(n):
        out.append((_rotl((s[1] * 5) & MASK, 7) * 9) & MASK)
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
    return out


def test_matmul_identity_and_hand_values():
    np.testing.assert_array_equal(matmul([[1, 0], [0, 1]], [[5, 6], [7, 8]]), [[5, 6], [7, 8]])
    assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11.0]]
    assert matmul([[1, 2]], [[3], [4]]).dtype == FLOAT


def _triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i][j] = acc
    return np.array(out)


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((7, 5)).astype(FLOAT)
    b = rng.standard_normal((5, 3)).astype(FLOAT)
    np.testing.assert_allclose(matmul(a, b), _triple_loop(a, b), rtol=1e-6, atol=1e-7)


def test_matmul_random_shape_triples():
    rng = np.random.default_rng(1)
    for _ in range(100):
        m, k, n = rng.integers(1, 17, size=3)
        a = rng.standard_normal((m, k)).astype(FLOAT)
        b = rng.standard_normal((k, n)).astype(FLOAT)
        ref = _triple_loop(a, b)
        np.testing.assert_allclose(matmul(a, b), ref, rtol=1e-6, atol=1e-6 * np.abs(ref).max())


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_l2_norm():
    assert l2_norm([3, 4]) == 5.0
    assert l2_norm(np.zeros(7)) == 0.0
    v = np.random.default_rng(2).standard_normal(10_000).astype(FLOAT)
    oracle = math.sqrt(math.fsum(sorted(float(x) ** 2 for x in v)))
    assert l2_norm(v) == pytest.approx(oracle, rel=1e-6)


def test_splitmix64_known_first_output():
    # widely published first output for state 0
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


def test_rng_matches_python_reference():
    for seed in (0, 1, 42, 2**63 + 5):
        assert SeededRng(seed).next_uint64(50).tolist() == reference_xoshiro(seed, 50)


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_rng_backends_agree(backend):
    mod = kernels.numpy_backend if backend == "numpy" else kernels.numba_backend
    if mod is None:
        pytest.skip("numba unavailable")
    state = SeededRng(7).state
    out = np.empty(20, dtype=np.uint64)
    mod.xoshiro_fill(state, out)
    assert out.tolist() == reference_xoshiro(7, 20)


def test_rng_matches_randomgen():
    randomgen = pytest.importorskip("randomgen")
    rng = SeededRng(123)
    bg = randomgen.Xoshiro256()
    st = bg.state
    st["s"] = rng.state
    st["has_uint32"] = 0
    st["uinteger"] = 0
    bg.state = st
    np.testing.assert_array_equal(rng.next_uint64(1000), bg.random_raw(1000))


def test_rng_determinism_and_spawn():
    a, b = SeededRng(9), SeededRng(9)
    np.testing.assert_array_equal(a.uniform(100), b.uniform(100))
    ca, cb = a.spawn(), b.spawn()
    np.testing.assert_array_equal(ca.next_uint64(5), cb.next_uint64(5))
    assert not np.array_equal(SeededRng(9).next_uint64(5), SeededRng(10).next_uint64(5))
    u = SeededRng(3).uniform(10_000)
    assert u.min() >= 0.0 and u.max() < 1.0


def test_permutation_is_a_permutation():
    p = SeededRng(4).permutation(1000)
    assert sorted(p.tolist()) == list(range(1000))
    np.testing.assert_array_equal(p, SeededRng(4).permutation(1000))


def test_derive_seed_is_order_free():
    seeds = [derive_seed(99, i) for i in range(100)]
    assert len(set(seeds)) == 100
    assert derive_seed(99, 57) == seeds[57]


def test_gaussian_zero_std_and_domain():
    rng = SeededRng(0)
    before = rng.state
    np.testing.assert_array_equal(gaussian_sample(rng, 5, 0.0), np.zeros(5))
    np.testing.assert_array_equal(rng.state, before)
    with pytest.raises(DomainError):
        gaussian_sample(rng, 5, -1.0)


@pytest.mark.parametrize("std", [0.5, 1.0, 2.0])
def test_gaussian_moments(std):
    n = 10**6
    raw = gaussian_sample(SeededRng(11), n, std)
    assert raw.dtype == FLOAT and raw.shape == (n,)
    z = raw.astype(np.float64)
    assert abs(z.mean()) < 4 * std / math.sqrt(n)
    assert abs(z.var() / std**2 - 1) < 0.02


def test_gaussian_same_seed_identical():
    np.testing.assert_array_equal(gaussian_sample(SeededRng(5), 11, 1.0), gaussian_sample(SeededRng(5), 11, 1.0))


def test_resolve_threads_env(monkeypatch):
    monkeypatch.setenv("DPRL_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.delenv("DPRL_THREADS")
    assert resolve_threads(None) == 1


def test_chunked_map_order_independent_of_threads():
    f = lambda s, e: float(np.sum(np.arange(s, e) ** 0.5))  # noqa: E731
    one = chunked_map(f, 5000, chunk=128, threads=1)
    many = chunked_map(f, 5000, chunk=128, threads=4)
    assert one == many
