"""SGD and differentially private SGD training loops.

DP-SGD per step: clip every per-example gradient to l2 norm ``clip_bound``,
sum, add N(0, (sigma*C)^2 I) noise (or N(0, sigma^2 I) in decoupled mode),
divide by the batch length and take a plain gradient step.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError
from .netcore import (FLOAT, NetworkSpec, Parameters, as_batch, clipped_gradient_sum,
                      init_parameters, predict)
from .numcore import SeededRng, gaussian_sample


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    batch_size: int = 256
    epochs: int = 1
    iterations: Optional[int] = None  # overrides epochs when set
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.epochs < 0 or (self.iterations is not None and self.iterations < 0):
            raise DomainError("epochs and iterations must be >= 0")


@dataclass(frozen=True)
class DpSgdConfig(SgdConfig):
    noise_multiplier: float = 1.3
    clip_bound: float = 1.0
    decoupled_noise: bool = False
    # carried into reports verbatim; never computed here
    privacy_epsilon_label: Optional[float] = None
    privacy_delta_label: Optional[float] = None

    def __post_init__(self):
        super().__post_init__()
        if not self.noise_multiplier >= 0:
            raise DomainError("noise_multiplier must be >= 0")
        if not self.clip_bound > 0:
            raise DomainError("clip_bound must be > 0")

    @property
    def noise_std(self):
        """Std of the noise added to the summed clipped gradients."""
        if self.decoupled_noise:
            return self.noise_multiplier
        return self.noise_multiplier * self.clip_bound


@dataclass
class TrainTrace:
    losses: list = field(default_factory=list)  # batch-mean loss per iteration
    noise_std: list = field(default_factory=list)  # empirical std of injected noise per iteration
    epoch_of_iteration: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)  # per epoch
    test_accuracy: list = field(default_factory=list)
    wall_clock: float = field(default=0.0, compare=False)
    params: Optional[Parameters] = field(default=None, compare=False)

    def __eq__(self, other):
        if not isinstance(other, TrainTrace):
            return NotImplemented
        same = (self.losses == other.losses and self.noise_std == other.noise_std
                and self.epoch_of_iteration == other.epoch_of_iteration
                and self.train_accuracy == other.train_accuracy
                and self.test_accuracy == other.test_accuracy)
        if self.params is None or other.params is None:
            return same and self.params is other.params
        return same and np.array_equal(self.params.flat, other.params.flat)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# schema=1 kind=train_trace\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "noise_std", "epoch", "train_acc", "test_acc"])
        ends = {}
        for it, ep in enumerate(self.epoch_of_iteration):
            ends[ep] = it
        for it, (ls, ns, ep) in enumerate(zip(self.losses, self.noise_std, self.epoch_of_iteration)):
            tr = te = ""
            if ends.get(ep) == it and ep < len(self.train_accuracy):
                tr = repr(self.train_accuracy[ep])
                if ep < len(self.test_accuracy):
                    te = repr(self.test_accuracy[ep])
            w.writerow([it, repr(ls), repr(ns), ep, tr, te])
        return buf.getvalue()


def clip_per_example_gradient(g, clip_bound) -> np.ndarray:
    """g / max(1, ||g||_2 / C)."""
    if not clip_bound > 0:
        raise DomainError(f"clip bound must be > 0, got {clip_bound}")
    g = np.asarray(g)
    g64 = g.astype(np.float64)
    out = g64 / max(1.0, float(np.sqrt(np.sum(g64 * g64))) / clip_bound)
    return out.astype(g.dtype) if g.dtype.kind == "f" else out


def _apply_update(theta, grad_sum, n, lr, noise=None):
    total = grad_sum if noise is None else grad_sum + noise
    flat = np.asarray(theta.flat if isinstance(theta, Parameters) else theta, dtype=np.float64)
    return (flat - lr * (total / n)).astype(FLOAT)


def _wrap(theta, flat):
    return Parameters(theta.spec, flat) if isinstance(theta, Parameters) else flat


def sgd_step(spec, theta, batch, cfg: SgdConfig, threads=None, _stats=None):
    """theta - lr * mean per-example gradient."""
    x, y = batch
    grad_sum, ls, _ = clipped_gradient_sum(spec, theta, x, y, clip=None, threads=threads)
    if _stats is not None:
        _stats["loss"] = float(np.mean(ls))
        _stats["noise_std"] = 0.0
    return _wrap(theta, _apply_update(theta, grad_sum, len(ls), cfg.learning_rate))


def dp_sgd_step(spec, theta, batch, cfg: DpSgdConfig, rng: SeededRng, threads=None, _stats=None):
    """One DP-SGD update. Consumes |theta| Gaussians from ``rng`` unless sigma == 0."""
    x, y = batch
    grad_sum, ls, _ = clipped_gradient_sum(spec, theta, x, y, clip=cfg.clip_bound, threads=threads)
    noise = None
    if cfg.noise_multiplier > 0:
        noise = gaussian_sample(rng, grad_sum.size, cfg.noise_std).astype(np.float64)
    if _stats is not None:
        _stats["loss"] = float(np.mean(ls))
        _stats["noise_std"] = float(np.std(noise)) if noise is not None else 0.0
    return _wrap(theta, _apply_update(theta, grad_sum, len(ls), cfg.learning_rate, noise))


def evaluate_accuracy(spec, theta, dataset, chunk=1024) -> float:
    x, y = _xy(dataset)
    if len(y) == 0:
        return 0.0
    hits = 0
    for s in range(0, len(y), chunk):
        hits += int(np.sum(predict(spec, theta, x[s:s + chunk]) == y[s:s + chunk]))
    return hits / len(y)


def _xy(dataset):
    if hasattr(dataset, "images"):
        return dataset.images, dataset.labels
    return dataset


def train(spec: NetworkSpec, dataset, cfg: SgdConfig, rng: SeededRng, test=None,
          init: Optional[Parameters] = None, threads=None, eval_every_epoch=True) -> TrainTrace:
    """Run SGD or DP-SGD (chosen by the config type) and return the trace.

    Child streams are split off ``rng`` for initialization, shuffling and
    noise, so SGD and DP-SGD runs with one seed share init and batch order.
    """
    started = time.perf_counter()
    x, y = _xy(dataset)
    x, _ = as_batch(spec, x)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise DomainError("training set is empty")
    init_rng, shuffle_rng, noise_rng = rng.spawn(), rng.spawn(), rng.spawn()
    params = init.copy() if init is not None else init_parameters(spec, init_rng)
    n = len(y)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.iterations if cfg.iterations is not None else cfg.epochs * steps_per_epoch
    dp = isinstance(cfg, DpSgdConfig)
    trace = TrainTrace()
    it = 0
    epoch = 0
    while it < total:
        order = shuffle_rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            if it >= total:
                break
            idx = order[s:s + cfg.batch_size]
            stats = {}
            if dp:
                params = dp_sgd_step(spec, params, (x[idx], y[idx]), cfg, noise_rng, threads, stats)
            else:
                params = sgd_step(spec, params, (x[idx], y[idx]), cfg, threads, stats)
            trace.losses.append(stats["loss"])
            trace.noise_std.append(stats["noise_std"])
            trace.epoch_of_iteration.append(epoch)
            it += 1
        if eval_every_epoch:
            trace.train_accuracy.append(evaluate_accuracy(spec, params, (x, y)))
            if test is not None:
                trace.test_accuracy.append(evaluate_accuracy(spec, params, test))
        epoch += 1
    trace.params = params
    trace.wall_clock = time.perf_counter() - started
    return trace
