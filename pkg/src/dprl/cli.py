"""Command-line entry point: ``dprl <subcommand> [options]``.

Exit codes: 0 ok, 2 configuration/argument error, 3 data error,
4 numerical error. ``--threads`` falls back to ``DPRL_THREADS``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from .attacks import DEFAULT_EPS_GRID, PgdConfig, distance_histogram, fgsm_curve, pgd_table
from .datacorrupt import (CORRUPTIONS, DEFAULT_SEVERITY, CorruptionTable, apply_corruption, export_paths,
                          load_idx, save_idx)
from .errors import ConfigError, DataError, DprlError, NumericalError
from .experiment import load_config, load_datasets, run_experiment, train_models
from .geometry import cross_section, curvature_profile
from .netcore import load_checkpoint
from .numcore import SeededRng, resolve_threads
from .report import compare_models, emit_plot, read_curve_csv, read_profile_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _common(p, config_required=False):
    p.add_argument("--config", required=config_required, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="seed (default: first seed of the config, else 0)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--threads", type=int, default=None, help="worker threads (env DPRL_THREADS)")


def _data_args(p):
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.dprl)")
    p.add_argument("--images", help="IDX images; overrides the config's test split")
    p.add_argument("--labels", help="IDX labels")
    p.add_argument("--limit", type=int, default=None, help="use only the first N samples")
    p.add_argument("--tag", default=None, help="model tag in outputs (default: checkpoint file stem)")


def build_parser():
    parser = argparse.ArgumentParser(prog="dprl", description="SGD vs DP-SGD robustness experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train every trainer section of a config")
    _common(p, config_required=True)

    p = sub.add_parser("attack", help="FGSM curve or PGD table for one checkpoint")
    _common(p)
    _data_args(p)
    p.add_argument("--method", choices=("fgsm", "pgd"), default="fgsm")
    p.add_argument("--eps", type=_floats, default=None, help="comma-separated epsilons")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--step-size", type=float, default=0.01)

    p = sub.add_parser("deepfool", help="linearized boundary-distance histograms")
    _common(p)
    _data_args(p)
    p.add_argument("--bins", type=int, default=64)

    p = sub.add_parser("curvature", help="input-Hessian eigenvalue profile")
    _common(p)
    _data_args(p)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--m", type=int, default=15)

    p = sub.add_parser("cross-section", help="class map on the normal/random plane through a sample")
    _common(p)
    _data_args(p)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--resolution", type=int, default=41)
    p.add_argument("--half-extent", type=float, default=None)

    p = sub.add_parser("corrupt", help="export corrupted copies of an IDX dataset")
    _common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--kind", choices=CORRUPTIONS + ("all",), default="all")
    p.add_argument("--severity", type=float, default=None)
    p.add_argument("--base", default=None, help="file name prefix (default: images file stem)")

    p = sub.add_parser("report", help="recompute model comparisons from a run directory")
    p.add_argument("--out", required=True, help="run directory holding manifest.json")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help=argparse.SUPPRESS)
    p.add_argument("--threads", type=int, default=None, help=argparse.SUPPRESS)
    p.add_argument("--a", default=None, help="first model tag")
    p.add_argument("--b", default=None, help="second model tag")

    p = sub.add_parser("run", help="run a full experiment config")
    _common(p, config_required=True)
    return parser


def _seed(args, cfg=None):
    if args.seed is not None:
        return args.seed
    return cfg.seeds[0] if cfg is not None else 0


def _dataset(args):
    if args.images or args.labels:
        if not (args.images and args.labels):
            raise ConfigError("--images/--labels", "give both or neither")
        ds = load_idx(args.images, args.labels)
    elif args.config:
        _, ds = load_datasets(load_config(args.config))
    else:
        raise ConfigError("--config", "need --config or --images/--labels for the evaluation data")
    if args.limit:
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    return ds


def _model(args):
    if not os.path.exists(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    params = load_checkpoint(args.checkpoint)
    tag = args.tag or os.path.splitext(os.path.basename(args.checkpoint))[0]
    return params.spec, params, tag


def _out(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    print(path)


def cmd_train(args):
    cfg = load_config(args.config)
    out = _out(args, cfg.resolve(cfg.output_dir))
    res, files = train_models(cfg, _seed(args, cfg), out, args.threads)
    for f in files:
        print(f)
    for tag in res.tags:
        print(f"{tag}: train {res.train_accuracy[tag]:.4f} test {res.clean[tag]:.4f}")


def cmd_attack(args):
    spec, params, tag = _model(args)
    ds = _dataset(args)
    out = _out(args, ".")
    threads = resolve_threads(args.threads)
    if args.method == "fgsm":
        curve = fgsm_curve(spec, params, ds, args.eps or DEFAULT_EPS_GRID, tag, threads)
        _write(os.path.join(out, f"{tag}_fgsm.csv"), curve.to_csv())
        emit_plot(curve, os.path.join(out, f"{tag}_fgsm.svg"))
        return
    eps = args.eps or [0.1, 0.2, 0.3]
    settings = [(e, args.steps, args.step_size) for e in eps]
    for s in settings:
        PgdConfig(float(s[0]), float(s[2]), int(s[1]))
    accs = pgd_table(spec, params, ds, settings, threads)
    lines = ["# schema=1 kind=pgd_table", "model_tag,epsilon,steps,step_size,accuracy"]
    lines += [f"{tag},{e!r},{n},{a!r},{acc!r}" for (e, n, a), acc in zip(settings, accs)]
    _write(os.path.join(out, f"{tag}_pgd.csv"), "\n".join(lines) + "\n")


def cmd_deepfool(args):
    spec, params, tag = _model(args)
    ds = _dataset(args)
    out = _out(args, ".")
    for norm in ("l2", "linf"):
        h = distance_histogram(spec, params, ds, norm, args.bins, resolve_threads(args.threads))
        _write(os.path.join(out, f"{tag}_distances_{norm}.csv"), h.to_csv(tag))
        emit_plot(h, os.path.join(out, f"{tag}_distances_{norm}.svg"))
        print(f"mean {norm} distance: {h.mean:.6g} ({h.skipped} skipped)")


def cmd_curvature(args):
    spec, params, tag = _model(args)
    ds = _dataset(args)
    out = _out(args, ".")
    n = min(args.samples, len(ds))
    idx = np.sort(SeededRng(_seed(args)).permutation(len(ds))[:n])
    prof = curvature_profile(spec, params, (ds.images[idx], ds.labels[idx]), m=args.m)
    _write(os.path.join(out, f"{tag}_curvature.csv"), prof.to_csv(tag))
    emit_plot(prof, os.path.join(out, f"{tag}_curvature.svg"), tag=tag)


def cmd_cross_section(args):
    spec, params, tag = _model(args)
    ds = _dataset(args)
    if not 0 <= args.index < len(ds):
        raise ConfigError("--index", f"out of range for {len(ds)} samples")
    out = _out(args, ".")
    cs = cross_section(spec, params, ds.images[args.index], half_extent=args.half_extent,
                       resolution=args.resolution, rng=SeededRng(_seed(args)))
    stem = os.path.join(out, f"{tag}_sample{args.index}")
    _write(stem + ".csv", cs.to_csv(tag))
    emit_plot(cs, stem + ".svg")


def cmd_corrupt(args):
    ds = load_idx(args.images, args.labels)
    out = _out(args, ".")
    base = args.base or os.path.basename(args.images).split(".")[0].split("-")[0]
    kinds = CORRUPTIONS if args.kind == "all" else (args.kind,)
    rng = SeededRng(_seed(args))
    for kind in kinds:
        sev = args.severity if args.severity is not None else DEFAULT_SEVERITY[kind]
        corrupted = apply_corruption(ds, kind, sev, rng.spawn(), threads=resolve_threads(args.threads))
        img_path, lab_path = export_paths(out, base, kind, sev)
        save_idx(corrupted, img_path, lab_path)
        print(img_path)
        print(lab_path)


def cmd_report(args):
    path = os.path.join(args.out, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    seeds = [args.seed] if args.seed is not None else manifest["seeds"]
    rows = ["# schema=1 kind=comparison", "seed,metric,value"]
    for seed in seeds:
        result = _result_from_files(args.out, seed)
        tags = result.tags
        if len(tags) < 2 and not (args.a and args.b):
            raise DataError("need two model tags to compare")
        a, b = args.a or tags[0], args.b or tags[1]
        for k, v in compare_models(result, a, b).as_dict().items():
            if k not in ("tag_a", "tag_b") and v is not None:
                rows.append(f"{seed},{a}_vs_{b}:{k},{float(v)!r}")
    text = "\n".join(rows) + "\n"
    _write(os.path.join(args.out, "report.csv"), text)
    sys.stdout.write(text)


class _FileResult:
    """The subset of a seed's results that ``compare_models`` reads, rebuilt from CSVs."""

    def __init__(self):
        self.tags, self.clean, self.fgsm = [], {}, None
        self.histograms, self.profiles, self.corruption = {}, {}, None


class _Mean:
    def __init__(self, mean):
        self.mean = mean


class _Profile:
    def __init__(self, eig):
        self.eigenvalues = eig


def _read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _result_from_files(root, seed):
    d = os.path.join(root, f"seed_{seed}")
    if not os.path.isdir(d):
        raise DataError(f"no results for seed {seed} under {root}")
    res = _FileResult()
    rows = list(csv.DictReader(io.StringIO(_read(os.path.join(d, "accuracy.csv")).split("\n", 1)[1])))
    for r in rows:
        res.tags.append(r["model_tag"])
        res.clean[r["model_tag"]] = float(r["test_acc"])
    p = os.path.join(d, "fgsm_sweep", "curves.csv")
    if os.path.exists(p):
        res.fgsm = read_curve_csv(_read(p))
    p = os.path.join(d, "deepfool_hist", "means.csv")
    if os.path.exists(p):
        for r in csv.DictReader(io.StringIO(_read(p).split("\n", 1)[1])):
            res.histograms[r["model_tag"]] = {"l2": _Mean(float(r["mean_l2"])),
                                              "linf": _Mean(float(r["mean_linf"]))}
    p = os.path.join(d, "curvature", "profile.csv")
    if os.path.exists(p):
        res.profiles = {k: _Profile(v) for k, v in read_profile_csv(_read(p)).items()}
    p = os.path.join(d, "corruption_table", "table.csv")
    if os.path.exists(p):
        text = _read(p)
        tags = text.split("\n", 1)[0].split("models=", 1)[1].split(",")
        table = CorruptionTable(tags)
        for r in csv.DictReader(io.StringIO(text.split("\n", 1)[1])):
            if r["row"] == "Average":
                continue
            if not table.rows or table.rows[-1][0] != r["row"] or len(table.rows[-1][2]) == len(tags):
                table.rows.append((r["row"], r["severity"], []))
            table.rows[-1][2].append(float(r["accuracy"]))
        res.corruption = table
    return res


def cmd_run(args):
    report = run_experiment(args.config, out_dir=args.out,
                            seeds=[args.seed] if args.seed is not None else None, threads=args.threads)
    print(os.path.join(report.out_dir, "manifest.json"))
    failed = {name: st for name, st in report.manifest["suites"].items()
              if any(not s.startswith("ok") for s in st.values())}
    for name, st in failed.items():
        print(f"suite {name}: {st}", file=sys.stderr)


COMMANDS = {"train": cmd_train, "attack": cmd_attack, "deepfool": cmd_deepfool, "curvature": cmd_curvature,
            "cross-section": cmd_cross_section, "corrupt": cmd_corrupt, "report": cmd_report, "run": cmd_run}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is None and os.environ.get("DPRL_THREADS", "").strip():
        try:
            resolve_threads(None)
        except ValueError:
            print("error: DPRL_THREADS must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DprlError as exc:  # domain / dimension errors come from bad arguments
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
