import csv
import io
import math

import numpy as np
import pytest

from dprl import dptrain
from dprl.datacorrupt import synthesize_blobs
from dprl.dptrain import (DpSgdConfig, SgdConfig, TrainTrace, clip_per_example_gradient, dp_sgd_step,
                          evaluate_accuracy, sgd_step, train)
from dprl.errors import DomainError
from dprl.netcore import FLOAT, backward_params, init_parameters, mlp_synthetic, param_gradient64
from dprl.numcore import SeededRng

from oracles import linear_spec, random_network


def _batch(spec, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((n,) + spec.input_shape)
    y = rng.integers(0, spec.class_count, n)
    return x, y


def test_clip_examples():
    g = np.array([0.3, 0.4])
    np.testing.assert_array_equal(clip_per_example_gradient(g, 1.0), g)
    np.testing.assert_allclose(clip_per_example_gradient([3.0, 4.0], 1.0), [0.6, 0.8], rtol=1e-15)
    np.testing.assert_array_equal(clip_per_example_gradient(np.zeros(4), 1.0), np.zeros(4))
    with pytest.raises(DomainError):
        clip_per_example_gradient(g, 0.0)


def test_clip_norm_bound_and_direction():
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = rng.standard_normal(50) * rng.uniform(0.01, 20)
        c = rng.uniform(0.1, 5)
        out = clip_per_example_gradient(g, c)
        assert np.linalg.norm(out) <= c + 1e-6
        assert np.linalg.norm(out) == pytest.approx(min(np.linalg.norm(g), c), rel=1e-12)
        assert np.dot(out, g) / (np.linalg.norm(out) * np.linalg.norm(g)) == pytest.approx(1.0, abs=1e-12)


def test_config_domains():
    with pytest.raises(DomainError):
        SgdConfig(learning_rate=0)
    with pytest.raises(DomainError):
        SgdConfig(batch_size=0)
    with pytest.raises(DomainError):
        DpSgdConfig(noise_multiplier=-1)
    with pytest.raises(DomainError):
        DpSgdConfig(clip_bound=0)
    assert DpSgdConfig(noise_multiplier=2, clip_bound=3).noise_std == 6
    assert DpSgdConfig(noise_multiplier=2, clip_bound=3, decoupled_noise=True).noise_std == 2


def test_zero_gradient_batch_leaves_theta():
    spec, theta = linear_spec(np.zeros((3, 2)))
    # zero input: every weight gradient vanishes, so those entries must not move
    x = np.zeros((4, 2))
    g = param_gradient64(spec, theta, x, [0, 1, 2, 0])
    keep = np.where(g == 0)[0]
    out = sgd_step(spec, theta.astype(FLOAT), (x, [0, 1, 2, 0]), SgdConfig(learning_rate=0.5))
    np.testing.assert_array_equal(out[keep], theta.astype(FLOAT)[keep])


def test_quadratic_hand_example(monkeypatch):
    # swap in L = 0.5 * theta^2 so the update is theta - lr * theta
    def quad(spec, theta, x, y, clip=None, threads=None):
        t = np.asarray(theta, dtype=np.float64)
        return t.copy(), 0.5 * t ** 2, None

    monkeypatch.setattr(dptrain, "clipped_gradient_sum", quad)
    out = sgd_step(None, np.array([1.0], dtype=FLOAT), (None, [0]), SgdConfig(learning_rate=0.1))
    assert out[0] == pytest.approx(0.9, abs=1e-7)


def test_dp_sigma0_huge_clip_is_bit_identical_to_sgd():
    spec, theta, _, _ = random_network(1)
    theta = theta.astype(FLOAT)
    sgd_cfg = SgdConfig(learning_rate=0.05)
    dp_cfg = DpSgdConfig(learning_rate=0.05, noise_multiplier=0.0, clip_bound=1e9)
    rng = SeededRng(0)
    a = b = theta
    for step in range(100):
        batch = _batch(spec, 8, step)
        a = sgd_step(spec, a, batch, sgd_cfg)
        b = dp_sgd_step(spec, b, batch, dp_cfg, rng)
        assert a.tobytes() == b.tobytes()
    assert rng.state.tolist() == SeededRng(0).state.tolist()


def test_dp_small_clip_matches_scalar_loop():
    spec, theta, _, _ = random_network(2)
    theta = theta.astype(FLOAT)
    x, y = _batch(spec, 7, 11)
    cfg = DpSgdConfig(learning_rate=0.3, noise_multiplier=0.0, clip_bound=0.1)
    out = dp_sgd_step(spec, theta, (x, y), cfg, SeededRng(0)).astype(np.float64)
    total = np.zeros(spec.num_parameters)
    for i in range(len(y)):
        g = param_gradient64(spec, theta, x[i:i + 1], [y[i]])
        n = math.sqrt(math.fsum(v * v for v in g))
        total += g / max(1.0, n / 0.1)
    expected = theta.astype(np.float64) - 0.3 * total / len(y)
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-7)


def test_short_last_batch_divides_by_actual_length():
    spec, theta, _, _ = random_network(3)
    theta = theta.astype(FLOAT)
    x, y = _batch(spec, 3, 5)
    cfg = SgdConfig(learning_rate=1.0, batch_size=64)
    out = sgd_step(spec, theta, (x, y), cfg).astype(np.float64)
    mean = backward_params(spec, theta, x, y).rows.astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(out, theta - mean, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("decoupled,expected", [(False, 2.0), (True, 1.0)])
def test_injected_noise_std_one_parameter(monkeypatch, decoupled, expected):
    # zero gradient, theta reset every step: the update is exactly -lr * z / b
    monkeypatch.setattr(dptrain, "clipped_gradient_sum",
                        lambda spec, theta, x, y, clip=None, threads=None: (np.zeros(1), np.zeros(4), None))
    cfg = DpSgdConfig(learning_rate=0.5, noise_multiplier=1.0, clip_bound=2.0, decoupled_noise=decoupled)
    rng = SeededRng(21)
    zero = np.zeros(1, dtype=FLOAT)
    z = np.empty(100_000)
    for i in range(z.size):
        z[i] = -float(dp_sgd_step(None, zero, (None, None), cfg, rng)[0]) * 4 / 0.5
    assert abs(z.std() / expected - 1) < 0.02
    assert abs(z.mean()) < 4 * expected / math.sqrt(z.size)


def test_train_zero_iterations_returns_init():
    spec = mlp_synthetic(4, 3, 5)
    ds = (np.random.default_rng(0).random((10, 4)), np.arange(10) % 3)
    trace = train(spec, ds, SgdConfig(iterations=0), SeededRng(3))
    init = init_parameters(spec, SeededRng(3).spawn())
    np.testing.assert_array_equal(trace.params.flat, init.flat)
    assert trace.losses == []


def test_train_is_deterministic():
    spec = mlp_synthetic(4, 3, 5)
    rng = np.random.default_rng(0)
    ds = (rng.random((50, 4)), rng.integers(0, 3, 50))
    cfg = DpSgdConfig(learning_rate=0.1, batch_size=8, epochs=2)
    a = train(spec, ds, cfg, SeededRng(7), test=ds)
    b = train(spec, ds, cfg, SeededRng(7), test=ds)
    assert a == b
    assert a != train(spec, ds, cfg, SeededRng(8), test=ds)
    assert len(a.losses) == 2 * 7 and a.epoch_of_iteration[-1] == 1
    assert all(0 <= v <= 1 for v in a.train_accuracy + a.test_accuracy)


def test_train_thread_count_does_not_change_result():
    spec = mlp_synthetic(16, 3, 8)
    rng = np.random.default_rng(1)
    ds = (rng.random((300, 16)), rng.integers(0, 3, 300))
    cfg = DpSgdConfig(learning_rate=0.1, batch_size=150, epochs=1)
    a = train(spec, ds, cfg, SeededRng(2), threads=1)
    b = train(spec, ds, cfg, SeededRng(2), threads=4)
    assert a.params.flat.tobytes() == b.params.flat.tobytes()


def test_blobs_mlp_sgd_reaches_95_percent():
    blobs = synthesize_blobs(SeededRng(0), 200, 3, 64, margin=0.4)
    idx = np.arange(len(blobs))
    tr, te = blobs.subset(idx[:450]), blobs.subset(idx[450:])
    spec = mlp_synthetic(64, 3, 64)
    trace = train(spec, tr, SgdConfig(learning_rate=0.05, batch_size=8, epochs=30), SeededRng(0), test=te)
    assert trace.test_accuracy[-1] >= 0.95


def test_evaluate_accuracy_examples():
    spec, theta = linear_spec(np.eye(3))
    x = np.eye(3)
    assert evaluate_accuracy(spec, theta, (x, [0, 1, 2])) == 1.0
    spec, theta = linear_spec(np.zeros((10, 2)))
    y = np.arange(100) % 10
    assert evaluate_accuracy(spec, theta, (np.zeros((100, 2)), y)) == pytest.approx(0.1)


def test_trace_csv():
    t = TrainTrace(losses=[1.0, 0.5, 0.25], noise_std=[0.0] * 3, epoch_of_iteration=[0, 0, 1],
                   train_accuracy=[0.5, 0.75], test_accuracy=[0.4, 0.7])
    text = t.to_csv()
    assert text.startswith("# schema=1")
    rows = list(csv.DictReader(io.StringIO(text.split("\n", 1)[1])))
    assert [r["train_acc"] for r in rows] == ["", "0.5", "0.75"]
    assert rows[2]["test_acc"] == "0.7"
