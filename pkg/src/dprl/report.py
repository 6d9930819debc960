"""Self-contained SVG rendering, CSV read-back and model-vs-model gap summaries."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Optional
from xml.sax.saxutils import escape

import numpy as np

from .attacks import DistanceHistogram, RobustnessCurve
from .datacorrupt import CorruptionTable
from .errors import DataError, DomainError
from .geometry import CrossSection, CurvatureProfile

LOG_FLOOR = 1e-12
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

W, H = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 30, 50


def _num(v):
    return f"{v:.2f}"


def _tick_label(v):
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.0e}"
    return f"{v:.3g}"


class _Canvas:
    """Minimal SVG builder with a linear (or log10) data-to-pixel map."""

    def __init__(self, xlim, ylim, title="", xlabel="", ylabel="", logy=False):
        self.parts = []
        self.logy = logy
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 0.5, self.x1 + 0.5
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 0.5, self.y1 + 0.5
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel

    def px(self, x):
        return LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)

    def py(self, y):
        return H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)

    def axes(self, xticks, yticks):
        p = self.parts
        xa, xb, ya, yb = LEFT, W - RIGHT, H - BOTTOM, TOP
        p.append(f'<line x1="{xa}" y1="{ya}" x2="{xb}" y2="{ya}" stroke="black"/>')
        p.append(f'<line x1="{xa}" y1="{ya}" x2="{xa}" y2="{yb}" stroke="black"/>')
        for t in xticks:
            x = _num(self.px(t))
            p.append(f'<line x1="{x}" y1="{ya}" x2="{x}" y2="{ya + 5}" stroke="black"/>')
            p.append(f'<text x="{x}" y="{ya + 18}" font-size="11" text-anchor="middle">{_tick_label(t)}</text>')
        for t in yticks:
            y = _num(self.py(t))
            label = _tick_label(10.0 ** t) if self.logy else _tick_label(t)
            p.append(f'<line x1="{xa - 5}" y1="{y}" x2="{xa}" y2="{y}" stroke="black"/>')
            p.append(f'<text x="{xa - 8}" y="{y}" font-size="11" text-anchor="end" '
                     f'dominant-baseline="middle">{label}</text>')
        p.append(f'<text x="{(xa + xb) / 2:.1f}" y="{H - 12}" font-size="12" '
                 f'text-anchor="middle">{escape(self.xlabel)}</text>')
        p.append(f'<text x="16" y="{(ya + yb) / 2:.1f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 16 {(ya + yb) / 2:.1f})">{escape(self.ylabel)}</text>')
        if self.title:
            p.append(f'<text x="{W / 2:.1f}" y="18" font-size="13" text-anchor="middle">{escape(self.title)}</text>')

    def legend(self, tags):
        for i, tag in enumerate(tags):
            y = TOP + 10 + 18 * i
            x = W - RIGHT + 12
            color = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<line x1="{x}" y1="{y}" x2="{x + 18}" y2="{y}" stroke="{color}" stroke-width="2"/>')
            self.parts.append(f'<text x="{x + 24}" y="{y}" font-size="11" '
                              f'dominant-baseline="middle">{escape(str(tag))}</text>')

    def render(self, width=W, height=H):
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
                f'viewBox="0 0 {width} {height}">')
        return "\n".join([head] + self.parts + ["</svg>"]) + "\n"


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def curve_svg(curve: RobustnessCurve, title="FGSM accuracy") -> str:
    """One polyline per model tag over (epsilon, accuracy)."""
    if not curve.accuracies or not curve.epsilons:
        raise DomainError("empty curve")
    eps = [float(e) for e in curve.epsilons]
    cv = _Canvas((min(eps), max(eps)), (0.0, 1.0), title, "epsilon", "accuracy")
    cv.axes(_ticks(min(eps), max(eps)), _ticks(0.0, 1.0, 6))
    for i, (tag, accs) in enumerate(curve.accuracies.items()):
        if len(accs) == 0:
            raise DomainError(f"empty series for {tag!r}")
        pts = " ".join(f"{_num(cv.px(e))},{_num(cv.py(a))}" for e, a in zip(eps, accs))
        cv.parts.append(f'<polyline fill="none" stroke="{PALETTE[i % len(PALETTE)]}" stroke-width="2" '
                        f'points="{pts}"/>')
    cv.legend(list(curve.accuracies))
    return cv.render()


def histogram_svg(hist: DistanceHistogram, title=None) -> str:
    """One rect per bin; no background rectangle."""
    counts = np.asarray(hist.counts)
    if counts.size == 0:
        raise DomainError("empty histogram")
    edges = np.asarray(hist.edges, dtype=np.float64)
    top = max(1, int(counts.max()))
    cv = _Canvas((edges[0], edges[-1]), (0.0, float(top)), title or f"{hist.norm} distance",
                 f"{hist.norm} distance", "count")
    cv.axes(_ticks(edges[0], edges[-1]), _ticks(0.0, float(top)))
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        x, x2 = cv.px(a), cv.px(b)
        y = cv.py(float(c))
        cv.parts.append(f'<rect x="{_num(x)}" y="{_num(y)}" width="{_num(x2 - x)}" '
                        f'height="{_num(cv.py(0.0) - y)}" fill="{PALETTE[0]}" stroke="white" stroke-width="0.5"/>')
    if math.isfinite(hist.mean):
        mx = _num(cv.px(hist.mean))
        cv.parts.append(f'<line x1="{mx}" y1="{TOP}" x2="{mx}" y2="{H - BOTTOM}" stroke="{PALETTE[3]}" '
                        f'stroke-dasharray="4 3"/>')
    return cv.render()


def profile_svg(profiles: dict, title="input-Hessian eigenvalues") -> str:
    """log10 of the top eigenvalues vs rank; values below 1e-12 sit on the floor."""
    if not profiles or any(len(p.eigenvalues) == 0 for p in profiles.values()):
        raise DomainError("empty curvature profile")
    logs = {tag: np.log10(np.maximum(np.asarray(p.eigenvalues, dtype=np.float64), LOG_FLOOR))
            for tag, p in profiles.items()}
    m = max(len(v) for v in logs.values())
    lo = math.floor(min(float(v.min()) for v in logs.values()))
    hi = math.ceil(max(float(v.max()) for v in logs.values()))
    if hi == lo:
        hi = lo + 1
    cv = _Canvas((1, max(m, 2)), (lo, hi), title, "rank", "eigenvalue (log scale)", logy=True)
    step = max(1, (hi - lo) // 6)
    cv.axes(list(range(1, m + 1, max(1, m // 8))), list(range(lo, hi + 1, step)))
    for i, (tag, v) in enumerate(logs.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_num(cv.px(r + 1))},{_num(cv.py(float(e)))}" for r, e in enumerate(v))
        cv.parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        for r, e in enumerate(v):
            cv.parts.append(f'<circle cx="{_num(cv.px(r + 1))}" cy="{_num(cv.py(float(e)))}" r="2.5" fill="{color}"/>')
    cv.legend(list(logs))
    return cv.render()


def cross_section_svg(cs: CrossSection, cell=8) -> str:
    """Raster of predicted classes; x-axis = random direction, y-axis = boundary normal."""
    r = cs.resolution
    size = r * cell
    margin = 40
    parts = []
    for i in range(r):
        for j in range(r):
            # normal offset b_j grows upward
            x = margin + i * cell
            y = margin + (r - 1 - j) * cell
            color = PALETTE[int(cs.grid[i, j]) % len(PALETTE)]
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{color}"/>')
    c = margin + (r // 2) * cell + cell / 2
    parts.append(f'<circle cx="{c:.1f}" cy="{c:.1f}" r="{cell * 0.6:.1f}" fill="none" stroke="black" '
                 f'stroke-width="2" class="center"/>')
    parts.append(f'<text x="{margin + size / 2:.1f}" y="{margin + size + 24}" font-size="12" '
                 f'text-anchor="middle">random direction (half-extent {cs.half_extent:.4g})</text>')
    parts.append(f'<text x="14" y="{margin + size / 2:.1f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {margin + size / 2:.1f})">boundary normal</text>')
    classes = sorted(set(int(v) for v in np.unique(cs.grid)))
    for k, cls in enumerate(classes):
        y = margin + 14 * k
        parts.append(f'<rect x="{margin + size + 12}" y="{y}" width="10" height="10" '
                     f'fill="{PALETTE[cls % len(PALETTE)]}" class="legend"/>')
        parts.append(f'<text x="{margin + size + 28}" y="{y + 9}" font-size="11">class {cls}</text>')
    width, height = size + 2 * margin + 80, size + 2 * margin
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head] + parts + ["</svg>"]) + "\n"


def emit_plot(obj, path, **kwargs) -> str:
    """Render a curve, histogram, profile (or dict tag -> profile) or cross-section to ``path``."""
    if isinstance(obj, RobustnessCurve):
        svg = curve_svg(obj, **kwargs)
    elif isinstance(obj, DistanceHistogram):
        svg = histogram_svg(obj, **kwargs)
    elif isinstance(obj, CurvatureProfile):
        svg = profile_svg({kwargs.pop("tag", "model"): obj}, **kwargs)
    elif isinstance(obj, dict) and obj and all(isinstance(v, CurvatureProfile) for v in obj.values()):
        svg = profile_svg(obj, **kwargs)
    elif isinstance(obj, CrossSection):
        svg = cross_section_svg(obj, **kwargs)
    else:
        raise DomainError(f"cannot plot {type(obj).__name__}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(svg)
    return svg


# ---------------------------------------------------------------------------
# CSV read-back


def _rows(text):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# schema=1"):
        raise DataError("missing '# schema=1' header line")
    return list(csv.DictReader(io.StringIO("\n".join(lines[1:]))))


def read_curve_csv(text) -> RobustnessCurve:
    rows = _rows(text)
    eps, accs = [], {}
    for r in rows:
        e = float(r["epsilon"])
        if e not in eps:
            eps.append(e)
        accs.setdefault(r["model_tag"], []).append(float(r["accuracy"]))
    curve = RobustnessCurve(eps)
    for tag, a in accs.items():
        curve.add(tag, a)
    return curve


def read_histogram_csv(text) -> dict:
    """tag -> (bin_left, bin_right, count) arrays; means are recomputed from bin centers."""
    out = {}
    for r in _rows(text):
        out.setdefault(r["model_tag"], []).append((float(r["bin_left"]), float(r["bin_right"]), int(r["count"])))
    return {k: np.array(v) for k, v in out.items()}


def read_profile_csv(text) -> dict:
    out = {}
    for r in _rows(text):
        out.setdefault(r["model_tag"], []).append(float(r["mean_eigenvalue"]))
    return out


# ---------------------------------------------------------------------------
# comparison


@dataclass
class GapSummary:
    tag_a: str
    tag_b: str
    clean_gap: Optional[float] = None  # a - b
    fgsm_max_gap: Optional[float] = None
    fgsm_max_gap_epsilon: Optional[float] = None
    l2_distance_ratio: Optional[float] = None  # b / a
    linf_distance_ratio: Optional[float] = None
    top_eigenvalue_ratio: Optional[float] = None
    corruption_average_gap: Optional[float] = None
    corruption_baseline_gap: Optional[float] = None

    def as_dict(self):
        return asdict(self)


def _ratio(b, a):
    if a == b:
        return 1.0
    return b / a if a != 0 else math.inf


def fgsm_max_gap(curve: RobustnessCurve, a, b):
    """Largest a - b over the grid and the (first) epsilon where it occurs."""
    gaps = [x - y for x, y in zip(curve.accuracies[a], curve.accuracies[b])]
    k = int(np.argmax(gaps))
    return gaps[k], float(curve.epsilons[k])


def compare_models(result, tag_a, tag_b) -> GapSummary:
    """Gap metrics between two model tags of one seed's results.

    ``result`` needs some of: ``clean`` (tag -> acc), ``fgsm`` (curve),
    ``histograms`` (tag -> {norm: hist}), ``profiles`` (tag -> profile),
    ``corruption`` (table). Missing pieces leave the metric as None.
    """
    known = set(getattr(result, "tags", None) or [])
    for tag in (tag_a, tag_b):
        if tag not in known:
            raise DomainError(f"unknown model tag {tag!r}")
    g = GapSummary(tag_a, tag_b)
    clean = getattr(result, "clean", None) or {}
    if tag_a in clean and tag_b in clean:
        g.clean_gap = clean[tag_a] - clean[tag_b]
    curve = getattr(result, "fgsm", None)
    if curve is not None and tag_a in curve.accuracies and tag_b in curve.accuracies:
        g.fgsm_max_gap, g.fgsm_max_gap_epsilon = fgsm_max_gap(curve, tag_a, tag_b)
    hists = getattr(result, "histograms", None) or {}
    if tag_a in hists and tag_b in hists:
        if "l2" in hists[tag_a]:
            g.l2_distance_ratio = _ratio(hists[tag_b]["l2"].mean, hists[tag_a]["l2"].mean)
        if "linf" in hists[tag_a]:
            g.linf_distance_ratio = _ratio(hists[tag_b]["linf"].mean, hists[tag_a]["linf"].mean)
    profiles = getattr(result, "profiles", None) or {}
    if tag_a in profiles and tag_b in profiles:
        g.top_eigenvalue_ratio = _ratio(float(profiles[tag_b].eigenvalues[0]),
                                        float(profiles[tag_a].eigenvalues[0]))
    table: CorruptionTable = getattr(result, "corruption", None)
    if table is not None and tag_a in table.tags and tag_b in table.tags:
        ia, ib = table.tags.index(tag_a), table.tags.index(tag_b)
        avg = table.average()
        g.corruption_average_gap = avg[ia] - avg[ib]
        base = table.baseline[2]
        g.corruption_baseline_gap = base[ia] - base[ib]
    return g
