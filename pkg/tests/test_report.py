import re
from types import SimpleNamespace

import numpy as np
import pytest

from dprl.attacks import RobustnessCurve, histogram_of
from dprl.datacorrupt import CorruptionTable
from dprl.errors import DataError, DomainError
from dprl.geometry import CrossSection, CurvatureProfile
from dprl.report import (LOG_FLOOR, compare_models, emit_plot, fgsm_max_gap, read_curve_csv, read_histogram_csv,
                         read_profile_csv)


def _pairs(points):
    return [tuple(map(float, p.split(","))) for p in points.split()]


def test_two_point_curve_single_polyline(tmp_path):
    c = RobustnessCurve([0.0, 0.1])
    c.add("sgd", [0.9, 0.4])
    svg = emit_plot(c, tmp_path / "c.svg")
    polys = re.findall(r'<polyline[^>]*points="([^"]*)"', svg)
    assert len(polys) == 1 and len(_pairs(polys[0])) == 2
    assert (tmp_path / "c.svg").read_text() == svg
    assert svg.startswith("<svg") and "<text" in svg


def test_curve_one_polyline_per_tag_and_higher_accuracy_is_higher_on_screen(tmp_path):
    c = RobustnessCurve([0.0, 0.1, 0.2])
    c.add("a", [1.0, 0.5, 0.0])
    c.add("b", [0.2, 0.2, 0.2])
    polys = re.findall(r'points="([^"]*)"', emit_plot(c, tmp_path / "c.svg"))
    assert len(polys) == 2
    ys = [y for _, y in _pairs(polys[0])]
    assert ys[0] < ys[1] < ys[2]


def test_histogram_one_bin_one_rect(tmp_path):
    svg = emit_plot(histogram_of([0.5], "l2", bins=1), tmp_path / "h.svg")
    assert svg.count("<rect") == 1


def test_histogram_rect_per_bin(tmp_path):
    svg = emit_plot(histogram_of(np.linspace(0, 1, 50), "linf", bins=7), tmp_path / "h.svg")
    assert svg.count("<rect") == 7


def test_profile_zero_eigenvalue_uses_floor(tmp_path):
    prof = CurvatureProfile(np.array([1.0, 1e-3, 0.0]), np.zeros((1, 3)))
    svg = emit_plot(prof, tmp_path / "p.svg", tag="m")
    pts = _pairs(re.findall(r'points="([^"]*)"', svg)[0])
    assert len(pts) == 3 and all(np.isfinite(v) for p in pts for v in p)
    assert "1e-12" in svg and LOG_FLOOR == 1e-12


def test_profiles_dict_one_line_each(tmp_path):
    profs = {t: CurvatureProfile(np.array([3.0, 2.0]), np.zeros((1, 2))) for t in ("a", "b", "c")}
    assert emit_plot(profs, tmp_path / "p.svg").count("<polyline") == 3


def test_cross_section_raster(tmp_path):
    grid = np.zeros((5, 5), dtype=int)
    grid[:, :2] = 1
    cs = CrossSection(np.zeros(4), np.eye(4)[0], np.eye(4)[1], 1.0, 5, grid, 0, 0.5)
    svg = emit_plot(cs, tmp_path / "x.svg")
    assert svg.count("<rect") - svg.count('class="legend"') == 25
    assert 'class="center"' in svg


@pytest.mark.parametrize("obj", [RobustnessCurve([]), RobustnessCurve([0.1], {"a": []}), [1, 2], {}])
def test_empty_or_unknown_series_error(tmp_path, obj):
    with pytest.raises(DomainError):
        emit_plot(obj, tmp_path / "e.svg")


def test_rendering_is_deterministic(tmp_path):
    c = RobustnessCurve([0.0, 0.05, 0.1])
    c.add("x", [0.9, 0.7, 0.2])
    assert emit_plot(c, tmp_path / "a.svg") == emit_plot(c, tmp_path / "b.svg")


def test_csv_read_back():
    c = RobustnessCurve([0.0, 0.1])
    c.add("a", [0.9, 0.3])
    c.add("b", [0.8, 0.5])
    back = read_curve_csv(c.to_csv())
    assert back.epsilons == c.epsilons and back.accuracies == c.accuracies
    h = histogram_of([0.1, 0.2, 0.2], "l2", bins=4)
    arr = read_histogram_csv(h.to_csv("m"))["m"]
    assert arr.shape == (4, 3) and arr[:, 2].sum() == 3
    prof = CurvatureProfile(np.array([2.0, 1.0]), np.zeros((1, 2)))
    assert read_profile_csv(prof.to_csv("t")) == {"t": [2.0, 1.0]}
    with pytest.raises(DataError):
        read_curve_csv("model_tag,epsilon,accuracy\n")


def _result():
    curve = RobustnessCurve([0.0, 0.05, 0.1, 0.15])
    curve.add("sgd", [0.95, 0.8, 0.6, 0.3])
    curve.add("dp", [0.9, 0.6, 0.35, 0.2])
    hists = {"sgd": {"l2": histogram_of([2.0], "l2"), "linf": histogram_of([0.2], "linf")},
             "dp": {"l2": histogram_of([1.5], "l2"), "linf": histogram_of([0.1], "linf")}}
    profiles = {"sgd": CurvatureProfile(np.array([2.0, 1.0]), None),
                "dp": CurvatureProfile(np.array([8.0, 1.0]), None)}
    table = CorruptionTable(["sgd", "dp"], [("Baseline", "", [0.95, 0.9]), ("x", 1, [0.8, 0.6])])
    return SimpleNamespace(tags=["sgd", "dp"], clean={"sgd": 0.95, "dp": 0.9}, fgsm=curve,
                           histograms=hists, profiles=profiles, corruption=table)


def test_compare_same_tag_is_neutral():
    g = compare_models(_result(), "dp", "dp")
    assert g.clean_gap == 0 and g.fgsm_max_gap == 0 and g.corruption_average_gap == 0
    assert g.l2_distance_ratio == g.linf_distance_ratio == g.top_eigenvalue_ratio == 1.0


def test_compare_gaps_and_ratios():
    g = compare_models(_result(), "sgd", "dp")
    assert g.clean_gap == pytest.approx(0.05)
    assert g.fgsm_max_gap == pytest.approx(0.25) and g.fgsm_max_gap_epsilon == 0.1
    assert g.l2_distance_ratio == pytest.approx(0.75) and g.linf_distance_ratio == pytest.approx(0.5)
    assert g.top_eigenvalue_ratio == pytest.approx(4.0)
    assert g.corruption_average_gap == pytest.approx(0.2) and g.corruption_baseline_gap == pytest.approx(0.05)
    assert set(g.as_dict()) >= {"clean_gap", "fgsm_max_gap_epsilon", "top_eigenvalue_ratio"}


def test_compare_unknown_tag():
    with pytest.raises(DomainError):
        compare_models(_result(), "sgd", "nope")


def test_fgsm_max_gap_matches_csv_rescan():
    rng = np.random.default_rng(0)
    for _ in range(20):
        eps = list(np.round(np.cumsum(rng.uniform(0.01, 0.05, 10)), 4))
        c = RobustnessCurve(eps)
        c.add("a", list(rng.random(10)))
        c.add("b", list(rng.random(10)))
        text = c.to_csv()
        # independent rescan of the stored rows
        rows = [line.split(",") for line in text.splitlines()[2:]]
        acc = {}
        for tag, e, a in rows:
            acc.setdefault(float(e), {})[tag] = float(a)
        best = max(acc, key=lambda e: (acc[e]["a"] - acc[e]["b"], -e))
        gap, at = fgsm_max_gap(read_curve_csv(text), "a", "b")
        assert at == best and gap == pytest.approx(acc[best]["a"] - acc[best]["b"], abs=1e-15)
