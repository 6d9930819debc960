"""FGSM, PGD and linearized closest-boundary (DeepFool-style) distances."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateGeometryError, DomainError
from .netcore import FLOAT, as_batch, input_gradients64, logit_jacobian64, predict
from .numcore import chunked_map

DEFAULT_EPS_GRID = tuple(round(0.02 * i, 2) for i in range(16))  # 0.00 .. 0.30


@dataclass(frozen=True)
class FgsmConfig:
    epsilon: float
    pixel_bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise DomainError("epsilon must be >= 0")


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float
    step_size: float = 0.01
    steps: int = 40
    pixel_bounds: tuple = (0.0, 1.0)

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise DomainError("epsilon must be >= 0")
        if not self.step_size > 0:
            raise DomainError("step_size must be > 0")
        if self.steps < 0:
            raise DomainError("steps must be >= 0")


@dataclass(frozen=True)
class BoundaryDistance:
    l2: float
    linf: float
    nearest_class: int


@dataclass
class RobustnessCurve:
    """(epsilon, accuracy) pairs per model tag."""

    epsilons: list
    accuracies: dict = field(default_factory=dict)  # tag -> list

    def add(self, tag, accs):
        self.accuracies[tag] = list(accs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# schema=1 kind=robustness_curve\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_tag", "epsilon", "accuracy"])
        for tag, accs in self.accuracies.items():
            for eps, acc in zip(self.epsilons, accs):
                w.writerow([tag, repr(float(eps)), repr(float(acc))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# FGSM / PGD


def _fgsm64(spec, theta, xb, y, eps, lo, hi):
    g, _ = input_gradients64(spec, theta, xb, y)
    return np.clip(xb + eps * np.sign(g), lo, hi)


def fgsm(spec, theta, x, y, cfg: FgsmConfig) -> np.ndarray:
    """clip(x + eps * sign(grad_x loss), pixel bounds); sign(0) = 0."""
    x = np.asarray(x)
    xb, single = as_batch(spec, x)
    y = np.atleast_1d(y)
    out = _fgsm64(spec, theta, xb, y, cfg.epsilon, *cfg.pixel_bounds)
    return out.reshape(x.shape).astype(FLOAT)


def _pgd64(spec, theta, xb, y, cfg: PgdConfig, on_step=None):
    lo, hi = cfg.pixel_bounds
    adv = xb.copy()
    for t in range(cfg.steps):
        g, _ = input_gradients64(spec, theta, adv, y)
        adv = np.clip(adv + cfg.step_size * np.sign(g), xb - cfg.epsilon, xb + cfg.epsilon)
        adv = np.clip(adv, lo, hi)
        if on_step is not None and on_step(t + 1, adv):
            break
    return adv


def pgd(spec, theta, x, y, cfg: PgdConfig) -> np.ndarray:
    """Projected sign-gradient ascent from x (no random start)."""
    x = np.asarray(x)
    xb, _ = as_batch(spec, x)
    out = _pgd64(spec, theta, xb, np.atleast_1d(y), cfg)
    return out.reshape(x.shape).astype(FLOAT)


def _xy(dataset):
    if hasattr(dataset, "images"):
        return dataset.images, dataset.labels
    return dataset


def _attack_accuracy(spec, theta, dataset, attack, chunk=256, threads=None):
    x, y = _xy(dataset)
    xb, _ = as_batch(spec, x)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        return 0.0

    def work(s, e):
        adv = attack(xb[s:e], y[s:e]).astype(FLOAT)
        return int(np.sum(predict(spec, theta, adv) == y[s:e]))

    return sum(chunked_map(work, len(y), chunk=chunk, threads=threads)) / len(y)


def fgsm_curve(spec, theta, dataset, eps_grid=DEFAULT_EPS_GRID, tag="model", threads=None) -> RobustnessCurve:
    eps_grid = [float(e) for e in eps_grid]
    if any(b <= a for a, b in zip(eps_grid, eps_grid[1:])):
        raise DomainError("epsilon grid must be strictly increasing")
    accs = []
    for eps in eps_grid:
        if eps == 0:
            attack = lambda xb, y: xb  # noqa: E731
        else:
            attack = lambda xb, y, e=eps: _fgsm64(spec, theta, xb, y, e, 0.0, 1.0)  # noqa: E731
        accs.append(_attack_accuracy(spec, theta, dataset, attack, threads=threads))
    curve = RobustnessCurve(eps_grid)
    curve.add(tag, accs)
    return curve


def pgd_table(spec, theta, dataset, settings, threads=None) -> list:
    """Accuracy under PGD for each (epsilon, steps, step_size) setting."""
    out = []
    for eps, steps, alpha in settings:
        cfg = PgdConfig(float(eps), float(alpha), int(steps))
        out.append(_attack_accuracy(spec, theta, dataset, lambda xb, y: _pgd64(spec, theta, xb, y, cfg),
                                    threads=threads))
    return out


def pgd_iterations_to_flip_batch(spec, theta, x, y, cfg: PgdConfig, max_steps=None) -> np.ndarray:
    """Per-sample flip iteration; -1 where PGD never changes the prediction."""
    xb, _ = as_batch(spec, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    max_steps = cfg.steps if max_steps is None else max_steps
    result = np.full(len(y), -1, dtype=np.int64)
    result[predict(spec, theta, xb.astype(FLOAT)) != y] = 0

    def on_step(t, adv):
        fresh = (result < 0) & (predict(spec, theta, adv.astype(FLOAT)) != y)
        result[fresh] = t
        return bool(np.all(result >= 0))

    if np.any(result < 0) and max_steps > 0:
        run = PgdConfig(cfg.epsilon, cfg.step_size, max_steps, cfg.pixel_bounds)
        _pgd64(spec, theta, xb, y, run, on_step=on_step)
    return result


def pgd_iterations_to_flip(spec, theta, x, y, cfg: PgdConfig, max_steps=None) -> Optional[int]:
    """Smallest PGD iteration at which the prediction leaves ``y``.

    0 if the sample is already misclassified, None if it never flips.
    """
    r = int(pgd_iterations_to_flip_batch(spec, theta, x, y, cfg, max_steps)[0])
    return None if r < 0 else r


# ---------------------------------------------------------------------------
# closest linearized boundary


def _distances_from_jacobian(logits, jac, pred):
    """Per-sample (l2, linf, nearest) from logits (n,K) and jacobian (n,K,d)."""
    n, k = logits.shape
    jac = jac.reshape(n, k, -1)
    rows = np.arange(n)
    diff_f = np.abs(logits[rows, pred][:, None] - logits)  # (n,K)
    diff_g = jac[rows, pred][:, None, :] - jac  # (n,K,d)
    den2 = np.sqrt(np.sum(diff_g * diff_g, axis=2))
    den1 = np.sum(np.abs(diff_g), axis=2)
    valid = den2 >= 1e-12
    valid[rows, pred] = False
    with np.errstate(divide="ignore", invalid="ignore"):
        l2 = np.where(valid, diff_f / np.where(valid, den2, 1.0), np.inf)
        linf = np.where(valid, diff_f / np.where(valid, den1, 1.0), np.inf)
    nearest = np.argmin(l2, axis=1)
    ok = valid.any(axis=1)
    return l2.min(axis=1), linf.min(axis=1), nearest, ok


def deepfool_batch(spec, theta, x, chunk=128, threads=None):
    """Distances for every sample. Returns (l2, linf, nearest, ok) arrays."""
    xb, _ = as_batch(spec, x)

    def work(s, e):
        logits, jac = logit_jacobian64(spec, theta, xb[s:e])
        pred = np.argmax(logits.astype(FLOAT), axis=1)
        return _distances_from_jacobian(logits, jac, pred)

    parts = chunked_map(work, xb.shape[0], chunk=chunk, threads=threads)
    if not parts:
        empty = np.zeros(0)
        return empty, empty, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(4))


def deepfool_distance(spec, theta, x) -> BoundaryDistance:
    """Linearized distance from ``x`` to the nearest other-class boundary.

    The reference class is the model's own prediction at ``x``; the l-inf
    distance divides by the l1 norm of the logit-gradient difference.
    """
    xb, single = as_batch(spec, x)
    if not single:
        raise DomainError("deepfool_distance takes one sample; use deepfool_batch")
    l2, linf, nearest, ok = deepfool_batch(spec, theta, xb)
    if not ok[0]:
        raise DegenerateGeometryError("all classes have a vanishing logit-gradient difference")
    return BoundaryDistance(float(l2[0]), float(linf[0]), int(nearest[0]))


@dataclass
class DistanceHistogram:
    norm: str
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    samples: int
    skipped: int = 0

    def to_csv(self, tag="model") -> str:
        buf = io.StringIO()
        buf.write(f"# schema=1 kind=distance_histogram norm={self.norm}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_tag", "bin_left", "bin_right", "count"])
        for i, c in enumerate(self.counts):
            w.writerow([tag, repr(float(self.edges[i])), repr(float(self.edges[i + 1])), int(c)])
        return buf.getvalue()


def histogram_of(values, norm, bins=64, skipped=0) -> DistanceHistogram:
    values = np.asarray(values, dtype=np.float64)
    top = float(values.max()) if values.size else 0.0
    if top <= 0:
        top = 1.0
    counts, edges = np.histogram(values, bins=bins, range=(0.0, top))
    mean = float(values.mean()) if values.size else math.nan
    return DistanceHistogram(norm, edges, counts, mean, int(values.size), skipped)


def distance_histogram(spec, theta, dataset, norm="l2", bins=64, threads=None) -> DistanceHistogram:
    """Histogram (uniform bins over [0, max]) and mean of per-sample distances.

    Samples with degenerate geometry are excluded and counted in ``skipped``.
    """
    if norm not in ("l2", "linf"):
        raise DomainError("norm must be 'l2' or 'linf'")
    x, _ = _xy(dataset)
    l2, linf, _, ok = deepfool_batch(spec, theta, x, threads=threads)
    vals = (l2 if norm == "l2" else linf)[ok]
    return histogram_of(vals, norm, bins, skipped=int((~ok).sum()))
