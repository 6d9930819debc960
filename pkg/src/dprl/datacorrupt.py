"""Datasets: IDX ingestion/export, synthetic blobs, and a parametric corruption suite.

Native corruption kinds and their severity scale ``s`` (outputs are always
clamped to [0, 1]):

============== ============================================= ============
kind           effect                                        identity at
============== ============================================= ============
gaussian_noise x + N(0, s^2) per pixel, s >= 0                s = 0
shot_noise     Poisson(x * s) / s, s > 0                      s = inf
impulse_noise  each pixel w.p. s set to 0 or 1 (coin flip)    s = 0
brightness     x + s                                          s = 0
contrast       0.5 + (x - 0.5) * s, s >= 0                    s = 1
rotate         bilinear, s degrees counter-clockwise          s = 0
translate      shift right and down by integer s, zero fill   s = 0
pixelate       s x s block means, nearest upsample, s >= 1    s = 1
============== ============================================= ============

Stochastic kinds draw from a per-image sub-stream ``derive_seed(base, i)``,
so the result does not depend on how images are partitioned across workers.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .dptrain import evaluate_accuracy
from .errors import DataError, DomainError, ParseError
from .numcore import FLOAT, SeededRng, chunked_map, derive_seed, gaussian_sample

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

CORRUPTIONS = ("gaussian_noise", "shot_noise", "impulse_noise", "brightness",
               "contrast", "rotate", "translate", "pixelate")

# severities used when a config asks for a kind without giving one; each is
# mild, costing a clean MNIST MLP roughly 5-10 accuracy points (translate: 1 px
# is the smallest shift and costs more)
DEFAULT_SEVERITY = {
    "gaussian_noise": 0.2,
    "shot_noise": 1.0,
    "impulse_noise": 0.1,
    "brightness": 0.1,
    "contrast": 0.8,
    "rotate": 15.0,
    "translate": 1,
    "pixelate": 4,
}


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=FLOAT)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.shape[0] == 0:
            raise DataError("dataset is empty")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if not np.all(np.isfinite(self.images)) or self.images.min() < 0 or self.images.max() > 1:
            raise DataError("pixel values must lie in [0, 1]")
        if self.labels.min() < 0:
            raise DataError("labels must be non-negative")

    def __len__(self):
        return int(self.labels.shape[0])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.images.shape == other.images.shape and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels))

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], name or self.name)


def stratified_split(dataset: Dataset, test_fraction: float):
    """Per class, the trailing ``test_fraction`` of its samples (file order) go to test."""
    if not 0 < test_fraction < 1:
        raise DomainError("test_fraction must lie in (0, 1)")
    train_idx, test_idx = [], []
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        k = int(round(len(idx) * test_fraction))
        train_idx.append(idx[:len(idx) - k])
        test_idx.append(idx[len(idx) - k:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return dataset.subset(tr, dataset.name + "-train"), dataset.subset(te, dataset.name + "-test")


# ---------------------------------------------------------------------------
# IDX


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise ParseError(f"corrupt gzip stream: {exc}", field="gzip", offset=0) from exc
    return raw


def parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    """Decode an unsigned-byte IDX buffer with the expected magic."""
    if len(raw) < 4:
        raise ParseError(f"{what}: truncated header", field="magic", offset=len(raw))
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise ParseError(f"{what}: unexpected magic 0x{got:08x}, wanted 0x{magic:08x}", field="magic", offset=0)
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise ParseError(f"{what}: truncated dimension header", field="dims", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    need = int(np.prod(dims, dtype=np.int64))
    if len(raw) - end < need:
        raise ParseError(f"{what}: truncated data, expected {need} bytes, found {len(raw) - end}",
                         field="data", offset=len(raw))
    if len(raw) - end > need:
        raise ParseError(f"{what}: {len(raw) - end - need} trailing bytes", field="data", offset=end + need)
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=end).reshape(dims)


def load_idx(images_path, labels_path, name=None) -> Dataset:
    """Read an IDX image/label pair (optionally gzip-compressed); pixels / 255."""
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC, "images")
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"image count {images.shape[0]} != label count {labels.shape[0]}",
                         field="count", offset=4)
    if images.shape[0] == 0:
        raise ParseError("IDX pair holds no samples", field="count", offset=4)
    name = name or os.path.basename(str(images_path)).split(".")[0]
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), name)


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    return struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()


def quantize(images) -> np.ndarray:
    return np.rint(np.asarray(images, dtype=np.float64) * 255.0).clip(0, 255).astype(np.uint8)


def save_idx(dataset: Dataset, images_path, labels_path):
    """Inverse of :func:`load_idx` (uncompressed). Images must be N x H x W."""
    if len(dataset) == 0:
        raise DataError("refusing to write an empty dataset")
    if dataset.images.ndim != 3:
        raise DataError(f"IDX images need 3 dims, got shape {dataset.images.shape}")
    if dataset.labels.max() > 255:
        raise DataError("labels do not fit in one byte")
    with open(images_path, "wb") as fh:
        fh.write(idx_bytes(quantize(dataset.images), IMAGES_MAGIC))
    with open(labels_path, "wb") as fh:
        fh.write(idx_bytes(dataset.labels.astype(np.uint8), LABELS_MAGIC))


def export_paths(out_dir, base, kind, severity):
    stem = os.path.join(str(out_dir), f"{base}_{kind}_{_fmt(severity)}")
    return stem + ".idx", stem + ".labels.idx"


def _fmt(severity):
    s = float(severity)
    return str(int(s)) if s.is_integer() else repr(s)


# ---------------------------------------------------------------------------
# synthetic data


def synthesize_blobs(rng: SeededRng, n_per_class: int, classes: int, dim: int, margin: float,
                     spread: float = 0.1, name="blobs") -> Dataset:
    """Isotropic Gaussian blobs (std ``spread``) around well-separated centers.

    Centers sit at 0.5 + margin * q_c with orthonormal q_c, so every pair of
    centers is margin * sqrt(2) >= margin apart. Samples come out shuffled;
    images are side x side when ``dim`` is a square, else 1 x dim.
    """
    if not margin > 0:
        raise DomainError("margin must be > 0")
    if classes > dim:
        raise DomainError("need classes <= dim for orthogonal class centers")
    if n_per_class < 1 or classes < 1:
        raise DomainError("n_per_class and classes must be >= 1")
    center_rng, noise_rng, order_rng = rng.spawn(), rng.spawn(), rng.spawn()
    raw = gaussian_sample(center_rng, dim * classes, 1.0).astype(np.float64).reshape(dim, classes)
    q, _ = np.linalg.qr(raw)
    centers = 0.5 + margin * q.T  # (classes, dim)
    n = n_per_class * classes
    labels = np.repeat(np.arange(classes), n_per_class)
    noise = gaussian_sample(noise_rng, n * dim, spread).astype(np.float64).reshape(n, dim)
    x = np.clip(centers[labels] + noise, 0.0, 1.0)
    order = order_rng.permutation(n)
    side = int(round(math.sqrt(dim)))
    shape = (side, side) if side * side == dim else (1, dim)
    return Dataset(x[order].reshape((n,) + shape), labels[order], name)


# ---------------------------------------------------------------------------
# corruptions


def _check_severity(kind, s):
    if kind not in CORRUPTIONS:
        raise DomainError(f"unknown corruption kind {kind!r}")
    s = float(s)
    if math.isnan(s):
        raise DomainError("severity is NaN")
    if kind == "shot_noise":
        if not s > 0:
            raise DomainError("shot_noise severity must be > 0")
        return s
    if math.isinf(s):
        raise DomainError(f"{kind} severity must be finite")
    if kind in ("gaussian_noise", "contrast") and s < 0:
        raise DomainError(f"{kind} severity must be >= 0")
    if kind == "impulse_noise" and not 0 <= s <= 1:
        raise DomainError("impulse_noise severity is a fraction in [0, 1]")
    if kind in ("translate", "pixelate"):
        if not s.is_integer():
            raise DomainError(f"{kind} severity must be an integer")
        if kind == "pixelate" and s < 1:
            raise DomainError("pixelate factor must be >= 1")
        return int(s)
    return s


def rotate_image(img, degrees):
    """Bilinear counter-clockwise rotation about the image center, zero fill.

    Multiples of 90 degrees are exact (pure index permutations).
    """
    quarter = degrees / 90.0
    if float(quarter).is_integer():
        return np.rot90(img, int(quarter) % 4).copy()
    h, w = img.shape[:2]
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    sy = c * yy + s * xx + cy
    sx = c * xx - s * yy + cx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    src = np.asarray(img, dtype=np.float64)
    out = np.zeros(src.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi, xi = y0 + dy, x0 + dx
            ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            out[ok] += (wy * wx)[ok] * src[yi[ok], xi[ok]]
    return out


def translate_image(img, shift):
    """Shift content right and down by ``shift`` pixels (negative: left/up)."""
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    k = int(shift)
    if abs(k) >= h or abs(k) >= w:
        return out
    ys, yd = (slice(0, h - k), slice(k, h)) if k >= 0 else (slice(-k, h), slice(0, h + k))
    xs, xd = (slice(0, w - k), slice(k, w)) if k >= 0 else (slice(-k, w), slice(0, w + k))
    out[yd, xd] = img[ys, xs]
    return out


def pixelate_image(img, factor):
    """Replace each factor x factor block (edge blocks may be smaller) by its mean."""
    if factor == 1:
        return img.copy()
    h, w = img.shape[:2]
    src = np.asarray(img, dtype=np.float64)
    out = np.empty_like(src)
    for i in range(0, h, factor):
        for j in range(0, w, factor):
            block = src[i:i + factor, j:j + factor]
            out[i:i + factor, j:j + factor] = block.mean(axis=(0, 1))
    return out


def _corrupt_one(img, kind, s, seed):
    x = img.astype(np.float64)
    if kind == "brightness":
        y = x + s
    elif kind == "contrast":
        y = 0.5 + (x - 0.5) * s
    elif kind == "rotate":
        y = rotate_image(x, s)
    elif kind == "translate":
        y = translate_image(x, s)
    elif kind == "pixelate":
        y = pixelate_image(x, s)
    elif kind == "gaussian_noise":
        y = x + gaussian_sample(SeededRng(seed), x.size, s).astype(np.float64).reshape(x.shape)
    elif kind == "shot_noise":
        if math.isinf(s):
            return img.copy()
        y = SeededRng(seed).numpy_generator().poisson(x * s) / s
    else:  # impulse_noise
        u = SeededRng(seed).uniform(2 * x.size)
        hit = (u[:x.size] < s).reshape(x.shape)
        salt = (u[x.size:] < 0.5).reshape(x.shape).astype(np.float64)
        y = np.where(hit, salt, x)
    return np.clip(y, 0.0, 1.0)


def apply_corruption(dataset: Dataset, kind: str, severity, rng: SeededRng, threads=None) -> Dataset:
    """Corrupted copy of ``dataset``; labels and shape are preserved."""
    s = _check_severity(kind, severity)
    base = rng.spawn_seed()
    images = dataset.images
    out = np.empty_like(images)

    def work(start, stop):
        for i in range(start, stop):
            out[i] = _corrupt_one(images[i], kind, s, derive_seed(base, i))

    chunked_map(work, len(dataset), chunk=128, threads=threads)
    return Dataset(out, dataset.labels.copy(), f"{dataset.name}_{kind}_{_fmt(s)}")


# ---------------------------------------------------------------------------
# tables


@dataclass
class CorruptionTable:
    tags: list  # model tags, column order
    rows: list = field(default_factory=list)  # (name, severity, [acc per model])

    def _diff(self, accs):
        return accs[0] - accs[1] if len(accs) >= 2 else 0.0

    @property
    def baseline(self):
        return self.rows[0]

    @property
    def corruption_rows(self):
        return self.rows[1:]

    def average(self):
        body = self.corruption_rows
        if not body:
            return [math.nan] * len(self.tags)
        return [sum(r[2][k] for r in body) / len(body) for k in range(len(self.tags))]

    def difference(self, name):
        for r in self.rows:
            if r[0] == name:
                return self._diff(r[2])
        raise KeyError(name)

    def average_difference(self):
        body = self.corruption_rows
        return sum(self._diff(r[2]) for r in body) / len(body) if body else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# schema=1 kind=corruption_table models=" + ",".join(self.tags) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "severity", "model_tag", "accuracy", "difference"])
        table = list(self.rows) + [("Average", "", self.average())]
        diffs = [self._diff(r[2]) for r in self.rows] + [self.average_difference()]
        for (name, sev, accs), diff in zip(table, diffs):
            for tag, acc in zip(self.tags, accs):
                w.writerow([name, sev, tag, repr(float(acc)), repr(float(diff))])
        return buf.getvalue()


def corruption_table(spec, thetas, dataset: Dataset, kinds, rng: SeededRng = None, threads=None) -> CorruptionTable:
    """Accuracy of each model on the clean set and on every corruption.

    ``thetas`` is a dict tag -> parameters (insertion order defines the
    Difference column, first minus second). ``kinds`` holds (kind, severity)
    pairs, bare kind names (default severity) or pre-built Dataset objects,
    e.g. an externally generated corruption loaded with :func:`load_idx`.
    """
    if not thetas:
        raise DomainError("corruption_table needs at least one model")
    rng = rng if rng is not None else SeededRng(0)
    tags = list(thetas)
    table = CorruptionTable(tags)
    table.rows.append(("Baseline", "", [evaluate_accuracy(spec, thetas[t], dataset) for t in tags]))
    for item in kinds:
        if isinstance(item, Dataset):
            corrupted, name, sev = item, item.name, ""
        else:
            kind, sev = (item, DEFAULT_SEVERITY.get(item)) if isinstance(item, str) else item
            corrupted = apply_corruption(dataset, kind, sev, rng.spawn(), threads=threads)
            name = kind
        table.rows.append((name, sev, [evaluate_accuracy(spec, thetas[t], corrupted) for t in tags]))
    return table
