import csv
import io
import json
import os

import numpy as np
import pytest

from dprl.errors import ConfigError
from dprl.experiment import ExperimentConfig, load_config, load_datasets, run_experiment

from configs import MNIST_IMAGES, MNIST_LABELS, csv_bytes, synthetic, write

ALL_SUITES = {
    "fgsm_sweep": {"eps_grid": [0.0, 0.1, 0.2]},
    "pgd_table": {"settings": [[0.1, 5, 0.02], [0.2, 5, 0.05]], "samples": 20},
    "pgd_flip": {"max_steps": 10, "samples": 10},
    "deepfool_hist": {"bins": 8},
    "curvature": {"samples": 2, "m": 4},
    "cross_section": {"resolution": 9},
    "corruption_table": {"kinds": ["brightness", ["rotate", 20]]},
    "clip_plateau_sweep": {"clip_grid": [1, 3], "eps_grid": [0.0, 0.2, 0.3]},
}


def _read(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    assert text.startswith("# schema=1")
    return list(csv.DictReader(io.StringIO(text.split("\n", 1)[1])))


def test_config_round_trip():
    cfg = ExperimentConfig.from_dict(synthetic(ALL_SUITES))
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg and again.hash() == cfg.hash()
    assert cfg.suites["curvature"]["h"] == 1e-3  # defaults merged in


@pytest.mark.parametrize("mutate,path", [
    (lambda c: c["trainers"][0].update(kind="adam"), "config.trainers[0].kind"),
    (lambda c: c["trainers"][1].update(clip_bound=0), "config.trainers[1]"),
    (lambda c: c.update(seeds=[]), "config.seeds"),
    (lambda c: c.pop("dataset"), "config.dataset"),
    (lambda c: c["dataset"].update(margin=-1), "config.dataset.margin"),
    (lambda c: c.update(architecture="nope"), "config.architecture.preset"),
    (lambda c: c["suites"].update(bogus={}), "config.suites.bogus"),
    (lambda c: c["suites"].update(cross_section={"resolution": 4}), "config.suites.cross_section.resolution"),
    (lambda c: c["suites"].update(fgsm_sweep={"eps_grid": [0.2, 0.1]}), "config.suites.fgsm_sweep.eps_grid"),
    (lambda c: c["suites"].update(fgsm_sweep={"base": "ghost"}), "config.suites.fgsm_sweep.base"),
    (lambda c: c.update(extra=1), "config.extra"),
    (lambda c: c["trainers"][0].update(learning_rate="fast"), "config.trainers[0].learning_rate"),
])
def test_config_errors_name_the_field(mutate, path):
    raw = synthetic()
    mutate(raw)
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict(raw)
    assert err.value.path == path
    assert str(err.value).startswith(path)


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")


def test_idx_dataset_split_and_limits(tmp_path):
    raw = synthetic(dataset={"source": "idx", "images": MNIST_IMAGES, "labels": MNIST_LABELS,
                             "limit_train": 300, "limit_test": 50})
    train_ds, test_ds = load_datasets(ExperimentConfig.from_dict(raw))
    assert len(train_ds) == 300 and len(test_ds) == 50
    assert train_ds.images.shape[1:] == (28, 28)


def test_preset_mismatch_is_config_error(tmp_path):
    raw = synthetic(architecture="mlp_mnist")
    with pytest.raises(ConfigError):
        run_experiment(ExperimentConfig.from_dict(raw), out_dir=str(tmp_path))


def test_untrained_deepfool_smoke(tmp_path):
    raw = synthetic({"deepfool_hist": {}})
    for t in raw["trainers"]:
        t["iterations"] = 0
    rep = run_experiment(ExperimentConfig.from_dict(raw), out_dir=str(tmp_path))
    assert rep.manifest["suites"] == {"deepfool_hist": {"0": "ok"}}
    rows = _read(tmp_path / "seed_0" / "deepfool_hist" / "distances_l2.csv")
    assert len(rows) == 2 * 64 and sum(int(r["count"]) for r in rows) > 0
    assert rep.results[0].traces["sgd"].losses == []


def test_every_suite_runs_and_manifest_is_complete(tmp_path):
    path = write(tmp_path, synthetic(ALL_SUITES, output_dir="out"))
    rep = run_experiment(path)
    out = tmp_path / "out"
    assert rep.out_dir == str(out)
    m = json.loads((out / "manifest.json").read_text())
    assert set(m["suites"]) == set(ALL_SUITES)
    assert all(s == {"0": "ok"} for s in m["suites"].values()), m["suites"]
    for f in m["files"]:
        assert (out / f).is_file(), f
    assert {"config_hash", "seeds", "threads", "backend", "wall_clock_seconds"} <= set(m)
    assert "comparison.csv" in m["files"] and "summary.csv" in m["files"]
    for rel in ("seed_0/clip_plateau_sweep/plateau.csv", "seed_0/clip_plateau_sweep/curves.svg",
                "seed_0/pgd_flip/iterations.csv", "seed_0/models/dpsgd.dprl", "seed_0/train/sgd.csv"):
        assert rel in m["files"]
    assert any(f.startswith("seed_0/cross_section/sgd_sample") and f.endswith(".svg") for f in m["files"])
    plateau = _read(out / "seed_0" / "clip_plateau_sweep" / "plateau.csv")
    assert len(plateau) == 2
    summary = _read(out / "summary.csv")
    assert any(r["seed"] == "mean" for r in summary)
    gaps = rep.compare("sgd", "dpsgd")
    assert gaps[0].clean_gap is not None and gaps[0].corruption_average_gap is not None


def test_failing_suite_is_recorded_not_fatal(tmp_path):
    raw = synthetic({"curvature": {"samples": 1, "m": 99}, "deepfool_hist": {"bins": 4}})
    rep = run_experiment(ExperimentConfig.from_dict(raw), out_dir=str(tmp_path))
    st = rep.manifest["suites"]
    assert st["curvature"]["0"].startswith("error: DomainError") and st["deepfool_hist"]["0"] == "ok"


def test_same_config_twice_is_byte_identical(tmp_path):
    raw = synthetic(ALL_SUITES)
    run_experiment(ExperimentConfig.from_dict(raw), out_dir=str(tmp_path / "a"))
    run_experiment(ExperimentConfig.from_dict(raw), out_dir=str(tmp_path / "b"), threads=3)
    raw["parallel_suites"] = True
    run_experiment(ExperimentConfig.from_dict(raw), out_dir=str(tmp_path / "c"))
    a = csv_bytes(tmp_path / "a")
    assert a and a == csv_bytes(tmp_path / "b") == csv_bytes(tmp_path / "c")
    for rel in ("seed_0/fgsm_sweep/curves.svg", "seed_0/curvature/profile.svg"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "c" / rel).read_bytes()


def test_decoupled_sweep_noise_is_independent_of_clip(tmp_path):
    suites = {"fgsm_sweep": {"eps_grid": [0.0, 0.1], "clip_grid": [0.5, 1.0, 4.0], "decoupled": True}}
    raw = synthetic(suites)
    raw["trainers"][1]["noise_multiplier"] = 2.0
    run_experiment(ExperimentConfig.from_dict(raw), out_dir=str(tmp_path))
    rows = {r["model_tag"]: r for r in _read(tmp_path / "seed_0" / "fgsm_sweep" / "noise_diagnostics.csv")}
    swept = [r for tag, r in rows.items() if tag.startswith("C=")]
    assert sorted(r["model_tag"] for r in swept) == ["C=0.5/decoupled", "C=1/decoupled", "C=4/decoupled"]
    for r in swept:
        assert float(r["configured_noise_std"]) == 2.0
        assert abs(float(r["mean_empirical_noise_std"]) / 2.0 - 1) < 0.1
    # the coupled base model scales with C
    assert float(rows["dpsgd"]["configured_noise_std"]) == 2.0 * 1.0
    curves = _read(tmp_path / "seed_0" / "fgsm_sweep" / "curves.csv")
    assert {r["model_tag"] for r in curves} == {"sgd", "dpsgd"} | {r["model_tag"] for r in swept}


def test_multi_seed_mean_rows(tmp_path):
    raw = synthetic({"deepfool_hist": {"bins": 4}}, seeds=[0, 1])
    run_experiment(ExperimentConfig.from_dict(raw), out_dir=str(tmp_path))
    rows = _read(tmp_path / "summary.csv")
    vals = {}
    for r in rows:
        vals.setdefault((r["suite"], r["metric"], r["model_tag"]), {})[r["seed"]] = float(r["value"])
    for per in vals.values():
        assert per["mean"] == pytest.approx(np.mean([per["0"], per["1"]]))
    assert os.path.isdir(tmp_path / "seed_1")
