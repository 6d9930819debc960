import csv
import io
import json
import os

import numpy as np
import pytest

from dprl.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, main
from dprl.datacorrupt import CORRUPTIONS, Dataset, load_idx, save_idx
from dprl.netcore import Parameters, load_checkpoint, mlp_synthetic, save_checkpoint

from configs import MNIST_IMAGES, MNIST_LABELS, synthetic, write

SUITES = {"fgsm_sweep": {"eps_grid": [0.0, 0.1]}, "deepfool_hist": {"bins": 8},
          "curvature": {"samples": 2, "m": 3}, "corruption_table": {"kinds": ["brightness"]}}


def _rows(path):
    text = open(path, encoding="utf-8").read()
    assert text.startswith("# schema=1")
    return list(csv.DictReader(io.StringIO(text.split("\n", 1)[1])))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write(root, synthetic(SUITES))
    out = root / "models"
    assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
    return root, cfg, out / "seed_0" / "models"


@pytest.fixture(scope="module")
def tiny_idx(tmp_path_factory):
    root = tmp_path_factory.mktemp("idx")
    ds = load_idx(MNIST_IMAGES, MNIST_LABELS)
    small = ds.subset(np.arange(12))
    img, lab = str(root / "tiny-images-idx3-ubyte"), str(root / "tiny-labels-idx1-ubyte")
    save_idx(small, img, lab)
    return img, lab


def test_train_writes_checkpoints(trained):
    _, _, models = trained
    for tag in ("sgd", "dpsgd"):
        p = load_checkpoint(models / f"{tag}.dprl")
        assert p.spec.class_count == 3 and p.spec == mlp_synthetic(16, 3, 8)


def test_attack_fgsm_and_pgd(trained, capsys):
    root, cfg, models = trained
    out = root / "attack"
    ck = str(models / "sgd.dprl")
    assert main(["attack", "--config", cfg, "--checkpoint", ck, "--eps", "0,0.1", "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "sgd_fgsm.csv")
    assert [float(r["epsilon"]) for r in rows] == [0.0, 0.1]
    assert (out / "sgd_fgsm.svg").is_file()
    assert main(["attack", "--config", cfg, "--checkpoint", ck, "--method", "pgd", "--eps", "0.1",
                 "--steps", "3", "--step-size", "0.05", "--out", str(out), "--tag", "m"]) == EXIT_OK
    rows = _rows(out / "m_pgd.csv")
    assert len(rows) == 1 and rows[0]["steps"] == "3"
    assert 0.0 <= float(rows[0]["accuracy"]) <= 1.0


def test_deepfool_curvature_cross_section(trained):
    root, cfg, models = trained
    out = root / "geom"
    ck = str(models / "dpsgd.dprl")
    base = ["--config", cfg, "--checkpoint", ck, "--out", str(out), "--limit", "20"]
    assert main(["deepfool", "--bins", "5"] + base) == EXIT_OK
    assert len(_rows(out / "dpsgd_distances_l2.csv")) == 5
    assert main(["curvature", "--samples", "2", "--m", "3"] + base) == EXIT_OK
    assert [r["rank"] for r in _rows(out / "dpsgd_curvature.csv")] == ["1", "2", "3"]
    assert main(["cross-section", "--index", "4", "--resolution", "7"] + base) == EXIT_OK
    assert (out / "dpsgd_sample4.csv").is_file() and (out / "dpsgd_sample4.svg").is_file()


def test_cross_section_index_out_of_range(trained):
    root, cfg, models = trained
    rc = main(["cross-section", "--config", cfg, "--checkpoint", str(models / "sgd.dprl"), "--limit", "3",
               "--index", "3", "--out", str(root / "x")])
    assert rc == EXIT_CONFIG


def test_corrupt_exports_every_kind(tiny_idx, tmp_path, capsys):
    img, lab = tiny_idx
    assert main(["corrupt", "--images", img, "--labels", lab, "--out", str(tmp_path)]) == EXIT_OK
    printed = capsys.readouterr().out.split()
    assert len(printed) == 2 * len(CORRUPTIONS)
    for i in range(0, len(printed), 2):
        ds = load_idx(printed[i], printed[i + 1])
        assert len(ds) == 12 and ds.images.shape[1:] == (28, 28)
    assert any("rotate" in p for p in printed)


def test_corrupt_one_kind_with_severity(tiny_idx, tmp_path, capsys):
    img, lab = tiny_idx
    rc = main(["corrupt", "--images", img, "--labels", lab, "--kind", "brightness", "--severity", "0.0",
               "--out", str(tmp_path)])
    assert rc == EXIT_OK
    got = capsys.readouterr().out.split()
    assert load_idx(got[0], got[1]) == load_idx(img, lab)


def test_run_and_report(tmp_path, capsys):
    cfg = write(tmp_path, synthetic(SUITES))
    out = tmp_path / "run"
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert all(s == {"0": "ok"} for s in manifest["suites"].values())
    capsys.readouterr()
    assert main(["report", "--out", str(out)]) == EXIT_OK
    rows = {r["metric"]: float(r["value"]) for r in _rows(out / "report.csv")}
    # the report rebuilt from CSVs agrees with the one written during the run
    run_rows = {r["metric"]: float(r["value"]) for r in _rows(out / "comparison.csv") if r["seed"] == "0"}
    assert rows and rows["sgd_vs_dpsgd:clean_gap"] == pytest.approx(run_rows["sgd_vs_dpsgd:clean_gap"])
    assert set(rows) <= set(run_rows)


def test_bad_config_is_exit_2(tmp_path):
    raw = synthetic()
    raw["trainers"][0]["batch_size"] = 0
    assert main(["train", "--config", write(tmp_path, raw)]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG


def test_missing_config_flag_is_argparse_exit_2():
    with pytest.raises(SystemExit) as err:
        main(["train"])
    assert err.value.code == 2


def test_missing_or_corrupt_data_is_exit_3(trained, tmp_path):
    _, cfg, models = trained
    assert main(["attack", "--config", cfg, "--checkpoint", str(tmp_path / "nope.dprl")]) == EXIT_DATA
    junk = tmp_path / "junk.dprl"
    junk.write_bytes(b"NOPE1234")
    assert main(["deepfool", "--config", cfg, "--checkpoint", str(junk)]) == EXIT_DATA
    img = tmp_path / "img"
    img.write_bytes(b"\x00\x00\x08\x03\x00\x00")
    assert main(["corrupt", "--images", str(img), "--labels", str(img), "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["report", "--out", str(tmp_path / "empty")]) == EXIT_DATA


def test_degenerate_geometry_is_exit_4(tmp_path):
    spec = mlp_synthetic(4, 3, 5)
    ck = tmp_path / "flat.dprl"
    save_checkpoint(Parameters(spec, np.zeros(spec.num_parameters)), ck)  # every logit equal
    img, lab = str(tmp_path / "d-images"), str(tmp_path / "d-labels")
    save_idx(Dataset(np.full((2, 2, 2), 0.5), [0, 1]), img, lab)
    rc = main(["cross-section", "--checkpoint", str(ck), "--images", img, "--labels", lab, "--out", str(tmp_path)])
    assert rc == EXIT_NUMERICAL


def test_invalid_thread_env_is_exit_2(trained, monkeypatch):
    _, cfg, _ = trained
    monkeypatch.setenv("DPRL_THREADS", "many")
    assert main(["train", "--config", cfg]) == EXIT_CONFIG


def test_thread_count_does_not_change_outputs(trained, monkeypatch):
    root, cfg, models = trained
    ck = str(models / "sgd.dprl")
    monkeypatch.setenv("DPRL_THREADS", "3")
    assert main(["attack", "--config", cfg, "--checkpoint", ck, "--eps", "0,0.2", "--out", str(root / "t3")]) == 0
    monkeypatch.delenv("DPRL_THREADS")
    assert main(["attack", "--config", cfg, "--checkpoint", ck, "--eps", "0,0.2", "--out", str(root / "t1"),
                 "--threads", "1"]) == 0
    assert (root / "t3" / "sgd_fgsm.csv").read_bytes() == (root / "t1" / "sgd_fgsm.csv").read_bytes()


def test_console_script_is_declared():
    text = open(os.path.join(os.path.dirname(__file__), "..", "pyproject.toml"), encoding="utf-8").read()
    assert 'dprl = "dprl.cli:main"' in text
