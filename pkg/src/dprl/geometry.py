"""Input-space curvature profiles and decision-boundary cross-sections."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import kernels
from .attacks import deepfool_distance
from .errors import DomainError, NumericalError
from .netcore import FLOAT, as_batch, input_gradients64, logit_jacobian64, predict
from .numcore import SeededRng, gaussian_sample

MAX_DENSE_DIM = 4096


def jacobi_eigenvalues(a, rel_tol=1e-9, max_sweeps=100):
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.

    Converged when the off-diagonal Frobenius norm falls below
    ``rel_tol * ||A||_F``. Raises NumericalError after ``max_sweeps``.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"expected a square matrix, got {a.shape}")
    fro = float(np.sqrt(np.sum(a * a)))
    if fro == 0.0 or a.shape[0] == 1:
        return np.sort(np.diag(a))[::-1].copy()
    sweeps = kernels.jacobi_sweeps(a, kernels.round_robin_schedule(a.shape[0]), rel_tol * fro, max_sweeps)
    if sweeps < 0:
        raise NumericalError(f"Jacobi did not converge within {max_sweeps} sweeps")
    return np.sort(np.diag(a))[::-1].copy()


def input_hessian(spec, theta, x, y, h=1e-3, grad_fn=None, symmetrize=True):
    """Hessian of the loss with respect to the input by central differences
    of analytic input gradients: column j is (g(x + h e_j) - g(x - h e_j)) / 2h.

    ``grad_fn(batch) -> (n, d)`` overrides the cross-entropy gradient.
    """
    xb, _ = as_batch(spec, x)
    d = spec.input_size
    if d > MAX_DENSE_DIM:
        raise DomainError(f"input dimension {d} exceeds dense Hessian limit {MAX_DENSE_DIM}")
    base = xb.reshape(-1)
    eye = np.eye(d) * h
    probes = np.concatenate([base + eye, base - eye])
    if grad_fn is None:
        labels = np.full(2 * d, int(np.atleast_1d(y)[0]))
        g, _ = input_gradients64(spec, theta, probes, labels)
    else:
        g = grad_fn(probes)
    g = np.asarray(g, dtype=np.float64).reshape(2 * d, d)
    hess = ((g[:d] - g[d:]) / (2 * h)).T  # column j from probe j
    if symmetrize:
        hess = 0.5 * (hess + hess.T)
    return hess


@dataclass
class CurvatureProfile:
    eigenvalues: np.ndarray  # descending, length m
    per_sample: np.ndarray  # (samples, m)

    def to_csv(self, tag="model") -> str:
        buf = io.StringIO()
        buf.write("# schema=1 kind=curvature_profile\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_tag", "rank", "mean_eigenvalue"])
        for r, v in enumerate(self.eigenvalues, start=1):
            w.writerow([tag, r, repr(float(v))])
        return buf.getvalue()


def curvature_profile(spec, theta, samples, m=15, hessian_fn=None, h=1e-3) -> CurvatureProfile:
    """Average over samples of the sorted input-Hessian spectra, top ``m``.

    ``samples`` is (x, y); labels are the ground truth used in the loss.
    ``hessian_fn(x, y) -> H`` replaces :func:`input_hessian` (test seam).
    """
    xs, ys = samples
    xb, _ = as_batch(spec, xs) if hessian_fn is None else (np.asarray(xs), False)
    ys = np.atleast_1d(np.asarray(ys))
    if len(ys) == 0:
        raise DomainError("curvature profile needs at least one sample")
    rows = []
    for x, y in zip(xb, ys):
        hess = hessian_fn(x, y) if hessian_fn is not None else input_hessian(spec, theta, x, y, h=h)
        if m > hess.shape[0]:
            raise DomainError(f"m={m} exceeds the input dimension {hess.shape[0]}")
        rows.append(jacobi_eigenvalues(hess)[:m])
    per_sample = np.array(rows)
    return CurvatureProfile(per_sample.mean(axis=0), per_sample)


def boundary_normal(spec, theta, x):
    """Unit normal of the closest linearized boundary at ``x``.

    Direction of grad(f_pred) - grad(f_k*), with k* the l2-closest class.
    """
    dist = deepfool_distance(spec, theta, x)
    logits, jac = logit_jacobian64(spec, theta, x)
    pred = int(np.argmax(logits[0].astype(FLOAT)))
    w = (jac[0, pred] - jac[0, dist.nearest_class]).reshape(-1)
    return w / np.sqrt(np.sum(w * w)), dist


@dataclass
class CrossSection:
    center: np.ndarray
    normal: np.ndarray  # y-axis of the grid
    direction: np.ndarray  # x-axis, orthogonal to normal
    half_extent: float
    resolution: int
    grid: np.ndarray  # (r, r) class ids; grid[i, j] at a_i along direction, b_j along normal
    center_class: int
    l2_distance: float

    @property
    def offsets(self):
        return grid_offsets(self.half_extent, self.resolution)

    def to_csv(self, tag="model") -> str:
        buf = io.StringIO()
        buf.write("# schema=1 kind=cross_section\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model_tag", "i", "j", "a", "b", "class"])
        off = self.offsets
        for i in range(self.resolution):
            for j in range(self.resolution):
                w.writerow([tag, i, j, repr(float(off[i])), repr(float(off[j])), int(self.grid[i, j])])
        return buf.getvalue()


def grid_offsets(half_extent, resolution):
    mid = resolution // 2
    return half_extent * (np.arange(resolution) - mid) / mid


def cross_section(spec, theta, x, half_extent=None, resolution=41, rng=None) -> CrossSection:
    """Predicted classes on the plane through ``x`` spanned by the boundary
    normal and a seeded random orthogonal direction.

    ``half_extent`` defaults to twice the sample's linearized l2 distance.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise DomainError("resolution must be odd and >= 3")
    rng = rng if rng is not None else SeededRng(0)
    xb, _ = as_batch(spec, x)
    u, dist = boundary_normal(spec, theta, xb[0])
    if half_extent is None:
        half_extent = 2.0 * dist.l2
    d = u.size
    for _ in range(100):
        r = gaussian_sample(rng, d, 1.0).astype(np.float64)
        v = r - np.dot(r, u) * u
        nv = np.sqrt(np.sum(v * v))
        if nv >= 1e-6:
            break
    else:
        raise NumericalError("could not draw a direction orthogonal to the normal")
    v = v / nv
    off = grid_offsets(half_extent, resolution)
    center = xb.reshape(-1)
    pts = center[None, None, :] + off[:, None, None] * v[None, None, :] + off[None, :, None] * u[None, None, :]
    pts = pts.reshape(resolution * resolution, d).astype(FLOAT)
    grid = np.asarray(predict(spec, theta, pts)).reshape(resolution, resolution)
    center_class = int(predict(spec, theta, xb.astype(FLOAT))[0])
    return CrossSection(center.astype(FLOAT), u, v, float(half_extent), resolution, grid, center_class, dist.l2)
