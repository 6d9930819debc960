"""JSON experiment configs and the suite runner behind ``dprl run``.

Config schema (every key except ``dataset``, ``trainers`` and ``seeds`` is
optional)::

    {
      "name": "mnist-desk",
      "output_dir": "runs/mnist",            # relative to the config file
      "seeds": [0, 1, 2],
      "threads": null,                       # falls back to --threads / DPRL_THREADS
      "parallel_suites": false,
      "dataset": {"source": "idx", "images": "...", "labels": "...",
                  "test_images": null, "test_labels": null,
                  "test_fraction": 0.2, "limit_train": null, "limit_test": null},
      # or {"source": "synthetic", "classes": 3, "dim": 64, "n_per_class": 200,
      #     "margin": 0.4, "spread": 0.1, "test_fraction": 0.25, "seed": 0}
      "architecture": {"preset": "mlp_mnist", "options": {}},
      "trainers": [
        {"tag": "sgd", "kind": "sgd", "learning_rate": 0.2, "batch_size": 64, "epochs": 5},
        {"tag": "dpsgd", "kind": "dpsgd", "learning_rate": 0.2, "batch_size": 64, "epochs": 5,
         "noise_multiplier": 1.3, "clip_bound": 1.0, "decoupled_noise": false,
         "privacy_epsilon_label": 5.0, "privacy_delta_label": 1e-6}
      ],
      "suites": {"fgsm_sweep": {}, "pgd_table": {}, "deepfool_hist": {}, ...}
    }

Suite option defaults live in :data:`SUITE_DEFAULTS`. Every file a run
writes is listed in ``manifest.json`` next to a per-suite, per-seed status.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .attacks import (DEFAULT_EPS_GRID, PgdConfig, RobustnessCurve, distance_histogram, fgsm_curve,
                      pgd_iterations_to_flip_batch, pgd_table)
from .datacorrupt import (CORRUPTIONS, DEFAULT_SEVERITY, corruption_table, load_idx,
                          stratified_split, synthesize_blobs)
from .dptrain import DpSgdConfig, SgdConfig, evaluate_accuracy, train
from .errors import ConfigError, DataError, DprlError
from .geometry import cross_section, curvature_profile
from .netcore import PRESETS, preset, save_checkpoint
from .numcore import SeededRng, derive_seed, resolve_threads
from .report import compare_models, emit_plot

SUITES = ("fgsm_sweep", "pgd_table", "pgd_flip", "deepfool_hist", "curvature",
          "cross_section", "corruption_table", "clip_plateau_sweep")

SUITE_DEFAULTS = {
    "fgsm_sweep": {"eps_grid": list(DEFAULT_EPS_GRID), "sigma_grid": [], "clip_grid": [],
                   "decoupled": False, "base": None},
    "pgd_table": {"settings": [[0.1, 40, 0.01], [0.2, 40, 0.01], [0.3, 40, 0.01]], "samples": None},
    "pgd_flip": {"epsilon": 0.3, "step_size": 0.01, "max_steps": 100, "samples": 100},
    "deepfool_hist": {"bins": 64, "samples": None},
    "curvature": {"samples": 10, "m": 15, "h": 1e-3},
    "cross_section": {"samples": 1, "resolution": 41, "half_extent": None},
    "corruption_table": {"kinds": [[k, DEFAULT_SEVERITY[k]] for k in CORRUPTIONS], "external": []},
    "clip_plateau_sweep": {"clip_grid": [1.0, 3.0, 10.0], "noise_multiplier": 1.3,
                           "eps_grid": list(DEFAULT_EPS_GRID), "plateau": [0.2, 0.3], "base": None},
}

TRAINER_KEYS = {"tag", "kind", "learning_rate", "batch_size", "epochs", "iterations", "noise_multiplier",
                "clip_bound", "decoupled_noise", "privacy_epsilon_label", "privacy_delta_label"}
IDX_KEYS = {"source", "images", "labels", "test_images", "test_labels", "test_fraction",
            "limit_train", "limit_test"}
SYNTH_KEYS = {"source", "classes", "dim", "n_per_class", "margin", "spread", "test_fraction", "seed"}
TOP_KEYS = {"name", "output_dir", "seeds", "threads", "parallel_suites", "dataset", "architecture",
            "trainers", "suites"}


# ---------------------------------------------------------------------------
# config


def _need(d, key, path, kind=None):
    if key not in d:
        raise ConfigError(f"{path}.{key}", "required field missing")
    return _typed(d[key], f"{path}.{key}", kind)


def _typed(v, path, kind):
    if kind is None:
        return v
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(path, f"expected a number, got {v!r}")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(path, f"expected an integer, got {v!r}")
        return v
    if kind is bool:
        if not isinstance(v, bool):
            raise ConfigError(path, f"expected true/false, got {v!r}")
        return v
    if kind is str:
        if not isinstance(v, str):
            raise ConfigError(path, f"expected a string, got {v!r}")
        return v
    raise TypeError(kind)


def _opt(d, key, path, kind, default=None):
    v = d.get(key, default)
    return v if v is None else _typed(v, f"{path}.{key}", kind)


def _unknown(d, allowed, path):
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}", "unknown field")


def _obj(v, path):
    if not isinstance(v, dict):
        raise ConfigError(path, "expected an object")
    return v


@dataclass
class TrainerSection:
    tag: str
    kind: str  # sgd | dpsgd
    learning_rate: float = 0.05
    batch_size: int = 256
    epochs: int = 1
    iterations: Optional[int] = None
    noise_multiplier: float = 1.3
    clip_bound: float = 1.0
    decoupled_noise: bool = False
    privacy_epsilon_label: Optional[float] = None
    privacy_delta_label: Optional[float] = None

    @classmethod
    def from_dict(cls, d, path):
        d = _obj(d, path)
        _unknown(d, TRAINER_KEYS, path)
        kind = _need(d, "kind", path, str)
        if kind not in ("sgd", "dpsgd"):
            raise ConfigError(f"{path}.kind", f"must be 'sgd' or 'dpsgd', got {kind!r}")
        sec = cls(tag=_need(d, "tag", path, str), kind=kind,
                  learning_rate=_opt(d, "learning_rate", path, float, 0.05),
                  batch_size=_opt(d, "batch_size", path, int, 256),
                  epochs=_opt(d, "epochs", path, int, 1),
                  iterations=_opt(d, "iterations", path, int),
                  noise_multiplier=_opt(d, "noise_multiplier", path, float, 1.3),
                  clip_bound=_opt(d, "clip_bound", path, float, 1.0),
                  decoupled_noise=_opt(d, "decoupled_noise", path, bool, False),
                  privacy_epsilon_label=_opt(d, "privacy_epsilon_label", path, float),
                  privacy_delta_label=_opt(d, "privacy_delta_label", path, float))
        try:
            sec.config()
        except DprlError as exc:
            raise ConfigError(path, str(exc)) from exc
        return sec

    def config(self, **overrides):
        fields = dict(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
                      iterations=self.iterations)
        if self.kind == "sgd" and not overrides:
            return SgdConfig(**fields)
        fields.update(noise_multiplier=self.noise_multiplier, clip_bound=self.clip_bound,
                      decoupled_noise=self.decoupled_noise, privacy_epsilon_label=self.privacy_epsilon_label,
                      privacy_delta_label=self.privacy_delta_label)
        fields.update(overrides)
        return DpSgdConfig(**fields)

    def to_dict(self):
        d = dict(tag=self.tag, kind=self.kind, learning_rate=self.learning_rate, batch_size=self.batch_size,
                 epochs=self.epochs, iterations=self.iterations)
        if self.kind == "dpsgd":
            d.update(noise_multiplier=self.noise_multiplier, clip_bound=self.clip_bound,
                     decoupled_noise=self.decoupled_noise, privacy_epsilon_label=self.privacy_epsilon_label,
                     privacy_delta_label=self.privacy_delta_label)
        return d


def _dataset_section(d, path):
    d = _obj(d, path)
    source = _need(d, "source", path, str)
    out = {"source": source}
    if source == "idx":
        _unknown(d, IDX_KEYS, path)
        out["images"] = _need(d, "images", path, str)
        out["labels"] = _need(d, "labels", path, str)
        out["test_images"] = _opt(d, "test_images", path, str)
        out["test_labels"] = _opt(d, "test_labels", path, str)
        if (out["test_images"] is None) != (out["test_labels"] is None):
            raise ConfigError(f"{path}.test_images", "test_images and test_labels go together")
        out["test_fraction"] = _opt(d, "test_fraction", path, float, 0.2)
        out["limit_train"] = _opt(d, "limit_train", path, int)
        out["limit_test"] = _opt(d, "limit_test", path, int)
    elif source == "synthetic":
        _unknown(d, SYNTH_KEYS, path)
        out["classes"] = _opt(d, "classes", path, int, 3)
        out["dim"] = _opt(d, "dim", path, int, 64)
        out["n_per_class"] = _opt(d, "n_per_class", path, int, 200)
        out["margin"] = _opt(d, "margin", path, float, 0.4)
        out["spread"] = _opt(d, "spread", path, float, 0.1)
        out["test_fraction"] = _opt(d, "test_fraction", path, float, 0.25)
        out["seed"] = _opt(d, "seed", path, int, 0)
        if out["margin"] <= 0:
            raise ConfigError(f"{path}.margin", "must be > 0")
        if out["classes"] < 2 or out["classes"] > out["dim"]:
            raise ConfigError(f"{path}.classes", "need 2 <= classes <= dim")
    else:
        raise ConfigError(f"{path}.source", f"must be 'idx' or 'synthetic', got {source!r}")
    if not 0 < out["test_fraction"] < 1:
        raise ConfigError(f"{path}.test_fraction", "must lie in (0, 1)")
    return out


def _architecture_section(v, path):
    if isinstance(v, str):
        v = {"preset": v}
    v = _obj(v, path)
    _unknown(v, {"preset", "options"}, path)
    name = _need(v, "preset", path, str)
    if name not in PRESETS:
        raise ConfigError(f"{path}.preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    options = _obj(v.get("options", {}), f"{path}.options")
    try:
        preset(name, **options)
    except (TypeError, DprlError) as exc:
        raise ConfigError(f"{path}.options", str(exc)) from exc
    return {"preset": name, "options": dict(options)}


def _suite_section(v, path, trainer_tags):
    v = _obj(v, path)
    out = {}
    for name, opts in v.items():
        if name not in SUITE_DEFAULTS:
            raise ConfigError(f"{path}.{name}", f"unknown suite; choose from {list(SUITES)}")
        opts = _obj(opts if opts is not None else {}, f"{path}.{name}")
        _unknown(opts, SUITE_DEFAULTS[name], f"{path}.{name}")
        merged = copy.deepcopy(SUITE_DEFAULTS[name])
        merged.update(copy.deepcopy(opts))
        _check_suite(name, merged, f"{path}.{name}", trainer_tags)
        out[name] = merged
    return out


def _check_suite(name, o, path, tags):
    def grid(key, positive=False):
        g = o[key]
        if not isinstance(g, list) or not all(isinstance(e, (int, float)) and not isinstance(e, bool) for e in g):
            raise ConfigError(f"{path}.{key}", "expected a list of numbers")
        if positive and any(e <= 0 for e in g):
            raise ConfigError(f"{path}.{key}", "entries must be > 0")
        return g

    def count(key, allow_none=True):
        v = o[key]
        if v is None and allow_none:
            return
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigError(f"{path}.{key}", "expected a positive integer")

    if "eps_grid" in o:
        g = grid("eps_grid")
        if not g or any(b <= a for a, b in zip(g, g[1:])) or g[0] < 0:
            raise ConfigError(f"{path}.eps_grid", "must be non-empty, non-negative and strictly increasing")
    if "base" in o and o["base"] is not None and o["base"] not in tags:
        raise ConfigError(f"{path}.base", f"no trainer tagged {o['base']!r}")
    if name == "fgsm_sweep":
        grid("sigma_grid")
        grid("clip_grid", positive=True)
        if any(s < 0 for s in o["sigma_grid"]):
            raise ConfigError(f"{path}.sigma_grid", "entries must be >= 0")
        _typed(o["decoupled"], f"{path}.decoupled", bool)
    elif name == "pgd_table":
        s = o["settings"]
        if not isinstance(s, list) or not s or not all(isinstance(r, list) and len(r) == 3 for r in s):
            raise ConfigError(f"{path}.settings", "expected a list of [epsilon, steps, step_size]")
        for i, (eps, steps, alpha) in enumerate(s):
            try:
                PgdConfig(float(eps), float(alpha), int(steps))
            except (DprlError, TypeError, ValueError) as exc:
                raise ConfigError(f"{path}.settings[{i}]", str(exc)) from exc
        count("samples")
    elif name == "pgd_flip":
        try:
            PgdConfig(float(o["epsilon"]), float(o["step_size"]), int(o["max_steps"]))
        except (DprlError, TypeError, ValueError) as exc:
            raise ConfigError(path, str(exc)) from exc
        count("samples")
    elif name == "deepfool_hist":
        count("bins", allow_none=False)
        count("samples")
    elif name == "curvature":
        count("samples", allow_none=False)
        count("m", allow_none=False)
        _typed(o["h"], f"{path}.h", float)
        if o["h"] <= 0:
            raise ConfigError(f"{path}.h", "must be > 0")
    elif name == "cross_section":
        count("samples", allow_none=False)
        r = o["resolution"]
        if isinstance(r, bool) or not isinstance(r, int) or r < 3 or r % 2 == 0:
            raise ConfigError(f"{path}.resolution", "must be an odd integer >= 3")
        if o["half_extent"] is not None and _typed(o["half_extent"], f"{path}.half_extent", float) <= 0:
            raise ConfigError(f"{path}.half_extent", "must be > 0")
    elif name == "corruption_table":
        kinds = o["kinds"]
        if not isinstance(kinds, list):
            raise ConfigError(f"{path}.kinds", "expected a list")
        for i, k in enumerate(kinds):
            kind = k if isinstance(k, str) else (k[0] if isinstance(k, list) and len(k) == 2 else None)
            if kind not in CORRUPTIONS:
                raise ConfigError(f"{path}.kinds[{i}]", f"expected a kind or [kind, severity], one of {CORRUPTIONS}")
        ext = o["external"]
        if not isinstance(ext, list):
            raise ConfigError(f"{path}.external", "expected a list")
        for i, e in enumerate(ext):
            e = _obj(e, f"{path}.external[{i}]")
            _unknown(e, {"name", "images", "labels"}, f"{path}.external[{i}]")
            for key in ("name", "images", "labels"):
                _need(e, key, f"{path}.external[{i}]", str)
    elif name == "clip_plateau_sweep":
        grid("clip_grid", positive=True)
        if not o["clip_grid"]:
            raise ConfigError(f"{path}.clip_grid", "must not be empty")
        _typed(o["noise_multiplier"], f"{path}.noise_multiplier", float)
        p = grid("plateau")
        if len(p) != 2 or p[0] > p[1]:
            raise ConfigError(f"{path}.plateau", "expected [low, high] epsilon range")


@dataclass
class ExperimentConfig:
    dataset: dict
    trainers: list  # TrainerSection
    seeds: list
    architecture: dict = field(default_factory=lambda: {"preset": "mlp_mnist", "options": {}})
    suites: dict = field(default_factory=dict)
    name: str = "experiment"
    output_dir: str = "runs"
    threads: Optional[int] = None
    parallel_suites: bool = False
    base_dir: str = field(default=".", compare=False)

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = _obj(d, "config")
        _unknown(d, TOP_KEYS, "config")
        trainers_raw = _need(d, "trainers", "config")
        if not isinstance(trainers_raw, list) or not trainers_raw:
            raise ConfigError("config.trainers", "expected a non-empty list")
        trainers = [TrainerSection.from_dict(t, f"config.trainers[{i}]") for i, t in enumerate(trainers_raw)]
        tags = [t.tag for t in trainers]
        if len(set(tags)) != len(tags):
            raise ConfigError("config.trainers", f"duplicate trainer tags in {tags}")
        seeds = _need(d, "seeds", "config")
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError("config.seeds", "expected a non-empty list of integers")
        for i, s in enumerate(seeds):
            if isinstance(s, bool) or not isinstance(s, int) or s < 0:
                raise ConfigError(f"config.seeds[{i}]", "expected a non-negative integer")
        threads = _opt(d, "threads", "config", int)
        if threads is not None and threads < 1:
            raise ConfigError("config.threads", "must be >= 1")
        return cls(dataset=_dataset_section(_need(d, "dataset", "config"), "config.dataset"),
                   trainers=trainers, seeds=list(seeds),
                   architecture=_architecture_section(d.get("architecture", "mlp_mnist"), "config.architecture"),
                   suites=_suite_section(d.get("suites", {}), "config.suites", tags),
                   name=_opt(d, "name", "config", str, "experiment"),
                   output_dir=_opt(d, "output_dir", "config", str, "runs"),
                   threads=threads,
                   parallel_suites=_opt(d, "parallel_suites", "config", bool, False),
                   base_dir=base_dir)

    def to_dict(self):
        return {"name": self.name, "output_dir": self.output_dir, "seeds": list(self.seeds),
                "threads": self.threads, "parallel_suites": self.parallel_suites,
                "dataset": dict(self.dataset), "architecture": copy.deepcopy(self.architecture),
                "trainers": [t.to_dict() for t in self.trainers], "suites": copy.deepcopy(self.suites)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def resolve(self, p):
        return p if p is None or os.path.isabs(p) else os.path.join(self.base_dir, p)

    @property
    def spec(self):
        return preset(self.architecture["preset"], **self.architecture["options"])


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return ExperimentConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(str(path))))


def load_datasets(cfg: ExperimentConfig):
    """(train, test) per the dataset section."""
    d = cfg.dataset
    if d["source"] == "synthetic":
        full = synthesize_blobs(SeededRng(d["seed"]), d["n_per_class"], d["classes"], d["dim"],
                                d["margin"], spread=d["spread"], name="synthetic")
        n_test = max(1, int(round(len(full) * d["test_fraction"])))
        idx = np.arange(len(full))
        return full.subset(idx[:-n_test], "synthetic-train"), full.subset(idx[-n_test:], "synthetic-test")
    try:
        full = load_idx(cfg.resolve(d["images"]), cfg.resolve(d["labels"]))
        if d["test_images"] is not None:
            train_ds = full
            test_ds = load_idx(cfg.resolve(d["test_images"]), cfg.resolve(d["test_labels"]))
        else:
            train_ds, test_ds = stratified_split(full, d["test_fraction"])
    except OSError as exc:
        raise DataError(f"cannot read dataset: {exc}") from exc
    if d["limit_train"]:
        train_ds = train_ds.subset(np.arange(min(d["limit_train"], len(train_ds))))
    if d["limit_test"]:
        test_ds = test_ds.subset(np.arange(min(d["limit_test"], len(test_ds))))
    return train_ds, test_ds


# ---------------------------------------------------------------------------
# results


@dataclass
class SeedResult:
    seed: int
    tags: list = field(default_factory=list)
    clean: dict = field(default_factory=dict)  # tag -> test accuracy
    train_accuracy: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    fgsm: Optional[RobustnessCurve] = None
    noise_diagnostics: list = field(default_factory=list)
    pgd: dict = field(default_factory=dict)  # tag -> accuracies per setting
    flips: dict = field(default_factory=dict)  # tag -> int array (-1 = not found)
    histograms: dict = field(default_factory=dict)  # tag -> {"l2": h, "linf": h}
    profiles: dict = field(default_factory=dict)
    cross_sections: dict = field(default_factory=dict)
    corruption: object = None
    plateau: Optional[RobustnessCurve] = None
    plateau_accuracy: dict = field(default_factory=dict)
    status: dict = field(default_factory=dict)


@dataclass
class RobustnessReport:
    config: ExperimentConfig
    out_dir: str
    results: list
    manifest: dict

    def compare(self, tag_a, tag_b):
        return [compare_models(r, tag_a, tag_b) for r in self.results]


def _csv_text(header, rows, kind):
    buf = io.StringIO()
    buf.write(f"# schema=1 kind={kind}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


class _Writer:
    """Collects relative paths of everything written under ``root``."""

    def __init__(self, root):
        self.root = root
        self.files = []

    def path(self, rel):
        full = os.path.join(self.root, rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        self.files.append(rel.replace(os.sep, "/"))
        return full

    def text(self, rel, content):
        with open(self.path(rel), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(content)

    def plot(self, rel, obj, **kw):
        emit_plot(obj, self.path(rel), **kw)


def _sample_indices(n_total, n, rng):
    if n is None or n >= n_total:
        return np.arange(n_total)
    return np.sort(rng.permutation(n_total)[:n])


def _base_trainer(cfg, name):
    want = cfg.suites[name].get("base")
    for t in cfg.trainers:
        if (want is None and t.kind == "dpsgd") or t.tag == want:
            return t
    return TrainerSection(tag="dpsgd", kind="dpsgd", learning_rate=cfg.trainers[0].learning_rate,
                          batch_size=cfg.trainers[0].batch_size, epochs=cfg.trainers[0].epochs,
                          iterations=cfg.trainers[0].iterations)


class _SeedRun:
    def __init__(self, cfg, spec, train_ds, test_ds, seed, threads, writer):
        self.cfg, self.spec, self.train_ds, self.test_ds = cfg, spec, train_ds, test_ds
        self.seed, self.threads, self.w = seed, threads, writer
        self.res = SeedResult(seed)
        self.prefix = f"seed_{seed}"

    def rng_for(self, suite):
        return SeededRng(derive_seed(self.seed, 1000 + SUITES.index(suite)))

    def fit(self, tag, tcfg):
        # every model of one seed shares init and batch order
        return train(self.spec, self.train_ds, tcfg, SeededRng(self.seed), test=self.test_ds,
                     threads=self.threads)

    def train_all(self):
        rows = []
        for t in self.cfg.trainers:
            trace = self.fit(t.tag, t.config())
            self.res.tags.append(t.tag)
            self.res.traces[t.tag] = trace
            self.res.params[t.tag] = trace.params
            self.res.clean[t.tag] = evaluate_accuracy(self.spec, trace.params, self.test_ds)
            self.res.train_accuracy[t.tag] = evaluate_accuracy(self.spec, trace.params, self.train_ds)
            self.w.text(f"{self.prefix}/train/{t.tag}.csv", trace.to_csv())
            save_checkpoint(trace.params, self.w.path(f"{self.prefix}/models/{t.tag}.dprl"))
            rows.append([t.tag, t.kind, self.res.train_accuracy[t.tag], self.res.clean[t.tag]])
        self.w.text(f"{self.prefix}/accuracy.csv",
                    _csv_text(["model_tag", "trainer", "train_acc", "test_acc"], rows, "accuracy"))

    def subset(self, n, suite):
        idx = _sample_indices(len(self.test_ds), n, self.rng_for(suite))
        return self.test_ds.subset(idx)

    # -- suites ------------------------------------------------------------

    def fgsm_sweep(self, o):
        eps = o["eps_grid"]
        curve = RobustnessCurve([float(e) for e in eps])
        noisy = []  # (tag, trace, config) of every DP model in this sweep
        for t in self.cfg.trainers:
            c = fgsm_curve(self.spec, self.res.params[t.tag], self.test_ds, eps, t.tag, self.threads)
            curve.add(t.tag, c.accuracies[t.tag])
            if t.kind == "dpsgd":
                noisy.append((t.tag, self.res.traces[t.tag], t.config()))
        base = _base_trainer(self.cfg, "fgsm_sweep")
        extra = [("sigma", float(s), {"noise_multiplier": float(s), "decoupled_noise": base.decoupled_noise})
                 for s in o["sigma_grid"]]
        extra += [("C", float(c), {"clip_bound": float(c), "decoupled_noise": bool(o["decoupled"])})
                  for c in o["clip_grid"]]
        for label, value, over in extra:
            tcfg = base.config(**over)
            tag = f"{label}={value:g}" + ("/decoupled" if tcfg.decoupled_noise else "")
            trace = self.fit(tag, tcfg)
            c = fgsm_curve(self.spec, trace.params, self.test_ds, eps, tag, self.threads)
            curve.add(tag, c.accuracies[tag])
            noisy.append((tag, trace, tcfg))
        diag = [[tag, tcfg.noise_multiplier, tcfg.clip_bound, int(tcfg.decoupled_noise), tcfg.noise_std,
                 float(np.mean(trace.noise_std)) if trace.noise_std else 0.0]
                for tag, trace, tcfg in noisy]
        self.res.fgsm = curve
        self.res.noise_diagnostics = diag
        d = f"{self.prefix}/fgsm_sweep"
        self.w.text(f"{d}/curves.csv", curve.to_csv())
        self.w.plot(f"{d}/curves.svg", curve)
        self.w.text(f"{d}/noise_diagnostics.csv", _csv_text(
            ["model_tag", "noise_multiplier", "clip_bound", "decoupled", "configured_noise_std",
             "mean_empirical_noise_std"], diag, "noise_diagnostics"))

    def pgd_table(self, o):
        ds = self.subset(o["samples"], "pgd_table")
        rows = []
        for tag in self.res.tags:
            accs = pgd_table(self.spec, self.res.params[tag], ds, o["settings"], threads=self.threads)
            self.res.pgd[tag] = accs
            for (eps, steps, alpha), acc in zip(o["settings"], accs):
                rows.append([tag, float(eps), int(steps), float(alpha), acc])
        self.w.text(f"{self.prefix}/pgd_table/pgd_table.csv", _csv_text(
            ["model_tag", "epsilon", "steps", "step_size", "accuracy"], rows, "pgd_table"))

    def pgd_flip(self, o):
        ds = self.subset(o["samples"], "pgd_flip")
        cfg = PgdConfig(float(o["epsilon"]), float(o["step_size"]), int(o["max_steps"]))
        rows = []
        for tag in self.res.tags:
            counts = pgd_iterations_to_flip_batch(self.spec, self.res.params[tag], ds.images, ds.labels, cfg)
            self.res.flips[tag] = counts
            for i, c in enumerate(counts):
                rows.append([tag, i, int(c) if c >= 0 else "not_found"])
        self.w.text(f"{self.prefix}/pgd_flip/iterations.csv",
                    _csv_text(["model_tag", "sample", "iterations"], rows, "pgd_flip"))

    def deepfool_hist(self, o):
        ds = self.subset(o["samples"], "deepfool_hist")
        for norm in ("l2", "linf"):
            parts = []
            for tag in self.res.tags:
                h = distance_histogram(self.spec, self.res.params[tag], ds, norm, o["bins"], self.threads)
                self.res.histograms.setdefault(tag, {})[norm] = h
                text = h.to_csv(tag)
                parts.append(text if not parts else text.split("\n", 2)[2])
                self.w.plot(f"{self.prefix}/deepfool_hist/{tag}_{norm}.svg", h,
                            title=f"{tag}: {norm} distance (mean {h.mean:.4g})")
            self.w.text(f"{self.prefix}/deepfool_hist/distances_{norm}.csv", "".join(parts))
        rows = [[tag, self.res.histograms[tag]["l2"].mean, self.res.histograms[tag]["linf"].mean,
                 self.res.histograms[tag]["l2"].skipped] for tag in self.res.tags]
        self.w.text(f"{self.prefix}/deepfool_hist/means.csv",
                    _csv_text(["model_tag", "mean_l2", "mean_linf", "skipped"], rows, "distance_means"))

    def curvature(self, o):
        ds = self.subset(o["samples"], "curvature")
        parts = []
        for tag in self.res.tags:
            prof = curvature_profile(self.spec, self.res.params[tag], (ds.images, ds.labels), m=o["m"], h=o["h"])
            self.res.profiles[tag] = prof
            text = prof.to_csv(tag)
            parts.append(text if not parts else text.split("\n", 2)[2])
        self.w.text(f"{self.prefix}/curvature/profile.csv", "".join(parts))
        self.w.plot(f"{self.prefix}/curvature/profile.svg", dict(self.res.profiles))

    def cross_section(self, o):
        rng = self.rng_for("cross_section")
        idx = _sample_indices(len(self.test_ds), o["samples"], rng)
        for k, i in enumerate(idx):
            direction_seed = rng.spawn_seed()
            for tag in self.res.tags:
                cs = cross_section(self.spec, self.res.params[tag], self.test_ds.images[i],
                                   half_extent=o["half_extent"], resolution=o["resolution"],
                                   rng=SeededRng(direction_seed))
                self.res.cross_sections.setdefault(tag, []).append(cs)
                stem = f"{self.prefix}/cross_section/{tag}_sample{int(i)}"
                self.w.text(stem + ".csv", cs.to_csv(tag))
                self.w.plot(stem + ".svg", cs)

    def corruption_table(self, o):
        kinds = [k if isinstance(k, str) else (k[0], k[1]) for k in o["kinds"]]
        for e in o["external"]:
            try:
                ext = load_idx(self.cfg.resolve(e["images"]), self.cfg.resolve(e["labels"]), name=e["name"])
            except OSError as exc:
                raise DataError(f"cannot read external corruption {e['name']!r}: {exc}") from exc
            kinds.append(ext)
        thetas = {tag: self.res.params[tag] for tag in self.res.tags}
        table = corruption_table(self.spec, thetas, self.test_ds, kinds, self.rng_for("corruption_table"),
                                 threads=self.threads)
        self.res.corruption = table
        self.w.text(f"{self.prefix}/corruption_table/table.csv", table.to_csv())

    def clip_plateau_sweep(self, o):
        base = _base_trainer(self.cfg, "clip_plateau_sweep")
        eps = [float(e) for e in o["eps_grid"]]
        curve = RobustnessCurve(eps)
        lo, hi = o["plateau"]
        rows = []
        for c in o["clip_grid"]:
            tcfg = base.config(clip_bound=float(c), noise_multiplier=float(o["noise_multiplier"]),
                               decoupled_noise=False)
            tag = f"C={float(c):g}"
            trace = self.fit(tag, tcfg)
            accs = fgsm_curve(self.spec, trace.params, self.test_ds, eps, tag, self.threads).accuracies[tag]
            curve.add(tag, accs)
            window = [a for e, a in zip(eps, accs) if lo - 1e-12 <= e <= hi + 1e-12]
            plateau = float(np.mean(window)) if window else math.nan
            self.res.plateau_accuracy[tag] = plateau
            rows.append([tag, float(c), plateau])
        self.res.plateau = curve
        d = f"{self.prefix}/clip_plateau_sweep"
        self.w.text(f"{d}/curves.csv", curve.to_csv())
        self.w.plot(f"{d}/curves.svg", curve, title="FGSM accuracy by clipping bound")
        self.w.text(f"{d}/plateau.csv", _csv_text(["model_tag", "clip_bound", "plateau_accuracy"], rows,
                                                   "plateau"))


def train_models(cfg: ExperimentConfig, seed: int, out_dir, threads=None):
    """Train every trainer section for one seed; writes checkpoints, traces and accuracy.csv."""
    train_ds, test_ds = load_datasets(cfg)
    run = _SeedRun(cfg, cfg.spec, train_ds, test_ds, seed, resolve_threads(threads), _Writer(out_dir))
    run.train_all()
    return run.res, [os.path.join(out_dir, f) for f in run.w.files]


def _run_suite(run: _SeedRun, name):
    getattr(run, name)(run.cfg.suites[name])


def _summary_rows(res: SeedResult):
    rows = []
    for tag in res.tags:
        rows.append(["clean", "test_accuracy", tag, res.clean[tag]])
    if res.fgsm is not None:
        for tag, accs in res.fgsm.accuracies.items():
            for e, a in zip(res.fgsm.epsilons, accs):
                rows.append(["fgsm_sweep", f"accuracy@eps={e:g}", tag, a])
    for tag, accs in res.pgd.items():
        for k, a in enumerate(accs):
            rows.append(["pgd_table", f"accuracy@setting{k}", tag, a])
    for tag, counts in res.flips.items():
        found = counts[counts >= 0]
        rows.append(["pgd_flip", "not_found", tag, float(np.sum(counts < 0))])
        rows.append(["pgd_flip", "mean_iterations", tag, float(found.mean()) if found.size else math.nan])
    for tag, hs in res.histograms.items():
        for norm, h in hs.items():
            rows.append(["deepfool_hist", f"mean_{norm}", tag, h.mean])
    for tag, p in res.profiles.items():
        rows.append(["curvature", "top_eigenvalue", tag, float(p.eigenvalues[0])])
    if res.corruption is not None:
        avg = res.corruption.average()
        for k, tag in enumerate(res.corruption.tags):
            rows.append(["corruption_table", "baseline", tag, res.corruption.baseline[2][k]])
            rows.append(["corruption_table", "average", tag, avg[k]])
    for tag, v in res.plateau_accuracy.items():
        rows.append(["clip_plateau_sweep", "plateau_accuracy", tag, v])
    return rows


def run_experiment(config, out_dir=None, seeds=None, threads=None) -> RobustnessReport:
    """Train every trainer section for every seed, run the selected suites, write files.

    ``config`` is a path or an :class:`ExperimentConfig`. A failing suite is
    recorded as ``error: ...`` in the manifest and does not stop the others.
    """
    cfg = load_config(config) if not isinstance(config, ExperimentConfig) else config
    started = time.perf_counter()
    out_dir = out_dir if out_dir is not None else cfg.resolve(cfg.output_dir)
    seeds = list(seeds) if seeds is not None else list(cfg.seeds)
    threads = resolve_threads(threads if threads is not None else cfg.threads)
    spec = cfg.spec
    train_ds, test_ds = load_datasets(cfg)
    if train_ds.images[0].size != spec.input_size:
        raise ConfigError("config.architecture", f"preset expects {spec.input_size} inputs but images have "
                                                 f"{train_ds.images[0].size} pixels")
    os.makedirs(out_dir, exist_ok=True)
    writer = _Writer(out_dir)
    results = []
    summary = []
    selected = [s for s in SUITES if s in cfg.suites]
    timings = {}
    for seed in seeds:
        t0 = time.perf_counter()
        run = _SeedRun(cfg, spec, train_ds, test_ds, seed, threads, writer)
        run.train_all()

        def one(name, run=run):
            try:
                _run_suite(run, name)
                return name, "ok"
            except Exception as exc:  # recorded, not fatal
                return name, f"error: {type(exc).__name__}: {exc}"

        if cfg.parallel_suites and len(selected) > 1:
            with ThreadPoolExecutor(max_workers=len(selected)) as pool:
                statuses = list(pool.map(one, selected))
        else:
            statuses = [one(name) for name in selected]
        run.res.status = dict(statuses)
        results.append(run.res)
        summary.extend([r[0], r[1], r[2], seed, r[3]] for r in _summary_rows(run.res))
        timings[str(seed)] = time.perf_counter() - t0

    summary.extend(_mean_rows(summary))
    writer.text("summary.csv", _csv_text(["suite", "metric", "model_tag", "seed", "value"], summary, "summary"))
    comparison = _comparison_rows(results, cfg)
    if comparison:
        writer.text("comparison.csv", _csv_text(["seed", "metric", "value"], comparison, "comparison"))
    writer.text("config.json", cfg.to_json() + "\n")
    manifest = {
        "name": cfg.name,
        "config_hash": cfg.hash(),
        "seeds": seeds,
        "threads": threads,
        "backend": kernels.BACKEND,
        "suites": {name: {str(r.seed): r.status.get(name, "missing") for r in results} for name in selected},
        "files": sorted(set(writer.files)),
        "wall_clock_seconds": {"total": time.perf_counter() - started, "per_seed": timings},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return RobustnessReport(cfg, out_dir, results, manifest)


def _mean_rows(rows):
    groups = {}
    for suite, metric, tag, _, value in rows:
        groups.setdefault((suite, metric, tag), []).append(value)
    return [[s, m, t, "mean", float(np.mean(v))] for (s, m, t), v in groups.items()]


def _comparison_rows(results, cfg):
    if len(cfg.trainers) < 2:
        return []
    a, b = cfg.trainers[0].tag, cfg.trainers[1].tag
    rows = []
    for r in results:
        for k, v in compare_models(r, a, b).as_dict().items():
            if k not in ("tag_a", "tag_b") and v is not None:
                rows.append([r.seed, f"{a}_vs_{b}:{k}", float(v)])
    return rows
