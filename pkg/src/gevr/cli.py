"""Command-line entry point: generate, run, stats, importance.

Exit codes: 0 success, 2 config error, 3 data error, 4 partial
experiment failure (some cells errored; completed cells are still
written).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .errors import (
    GevrError,
    InvalidConfigError,
    InvalidInputError,
    MissingCellError,
    RasterFormatError,
)
from .evaluate import MethodSpec, importance_from_artifacts, run_experiment, yearly_comparison
from .gp import GpConfig
from .raster import load_raster, load_response, make_folds, save_raster, save_response
from .synthetic import GeneratorConfig, config_from_dict, generate_synthetic
from .wrapper import WrapperConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_PARTIAL = 4

PAPER_GENERATOR = dict(rows=113, cols=113, n_days=1935,
                       years=tuple(range(2003, 2012)))


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise InvalidConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"malformed JSON in {path}: {exc}") from exc


def _ensure_outdir(path, overwrite):
    if os.path.exists(path) and os.listdir(path) and not overwrite:
        raise InvalidConfigError(
            f"output directory {path} is not empty (use --overwrite)"
        )
    os.makedirs(path, exist_ok=True)


def _build_dataclass(cls, doc, what):
    known = set(cls.__dataclass_fields__)
    extra = set(doc) - known
    if extra:
        raise InvalidConfigError(f"unknown {what} keys: {sorted(extra)}")
    return cls(**doc)


def _replace_checked(base, doc, what):
    known = set(type(base).__dataclass_fields__)
    extra = set(doc) - known
    if extra:
        raise InvalidConfigError(f"unknown {what} keys: {sorted(extra)}")
    return replace(base, **doc)


def _method_spec(doc, paper_shape):
    doc = dict(doc)
    gp_doc = doc.pop("gp", {})
    wrapper_doc = doc.pop("wrapper", {})
    # desk-scale budgets unless --paper-shape asks for the full experiment
    gp_base = GpConfig() if paper_shape else GpConfig(
        population_size=100, generations=30, n_runs=3)
    wrapper_base = WrapperConfig() if paper_shape else WrapperConfig(
        iterations=200, restarts=5)
    gp = _replace_checked(gp_base, gp_doc, "gp config")
    wrapper = _replace_checked(wrapper_base, wrapper_doc, "wrapper config")
    try:
        return _build_dataclass(
            MethodSpec, {**doc, "gp": gp, "wrapper": wrapper}, "method spec"
        )
    except InvalidInputError as exc:
        raise InvalidConfigError(str(exc)) from exc


def _load_dataset(doc, paper_shape):
    if "generator" in doc:
        gen_doc = dict(doc["generator"])
        if paper_shape:
            gen_doc = {**PAPER_GENERATOR, **gen_doc}
        config = config_from_dict(gen_doc)
        raster, response, truth = generate_synthetic(config, int(doc.get("seed", 0)))
        return raster, response, truth
    if "raster" in doc and "response" in doc:
        try:
            raster = load_raster(doc["raster"])
            response = load_response(doc["response"])
        except FileNotFoundError as exc:
            raise RasterFormatError(f"dataset file missing: {exc}") from exc
        if len(response.values) != raster.n_days:
            raise RasterFormatError("raster and response disagree on day count")
        return raster, response, None
    raise InvalidConfigError("dataset must specify either generator+seed or raster+response")


def _fmt(x):
    return repr(float(x))


def cmd_generate(args) -> int:
    doc = _load_json(args.config)
    gen_doc = doc.get("generator", doc)
    if args.paper_shape:
        gen_doc = {**PAPER_GENERATOR, **gen_doc}
    config = config_from_dict(gen_doc)
    _ensure_outdir(args.out, args.overwrite)
    raster, response, truth = generate_synthetic(config, args.seed)
    save_raster(raster, os.path.join(args.out, "raster.gevr"))
    save_response(response, os.path.join(args.out, "response.csv"))
    truth.to_json(os.path.join(args.out, "truth.json"))
    print(f"wrote raster/response/truth to {args.out}")
    return EXIT_OK


def _write_results(out, cells):
    ordered = sorted(cells, key=lambda c: (c.method, c.fold_year, c.seed))
    with open(os.path.join(out, "results.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "R", "fold_year", "seed", "train_err", "test_mae"])
        for c in ordered:
            if c.error is None:
                w.writerow([c.method, c.R if c.R is not None else "",
                            c.fold_year, c.seed, _fmt(c.train_err), _fmt(c.test_mae)])
    with open(os.path.join(out, "timings.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "R", "fold_year", "seed", "seconds"])
        for c in ordered:
            w.writerow([c.method, c.R if c.R is not None else "",
                        c.fold_year, c.seed, f"{c.seconds:.6f}"])
    os.makedirs(os.path.join(out, "preds"), exist_ok=True)
    os.makedirs(os.path.join(out, "models"), exist_ok=True)
    os.makedirs(os.path.join(out, "circles"), exist_ok=True)
    failures = []
    for c in ordered:
        stem = f"{c.method}_{c.fold_year}_{c.seed}"
        if c.error is not None:
            failures.append({"method": c.method, "fold_year": c.fold_year,
                             "seed": c.seed, "error": c.error})
            continue
        with open(os.path.join(out, "preds", stem + ".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "actual", "pred"])
            for d, (act, pred) in enumerate(zip(c.actuals, c.predictions)):
                w.writerow([d, _fmt(act), _fmt(pred)])
        with open(os.path.join(out, "models", stem + ".json"), "w") as fh:
            json.dump(c.artifact, fh)
        circle_rows = _artifact_circles(c.artifact)
        if circle_rows:
            with open(os.path.join(out, "circles", stem + ".csv"), "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["var", "lat", "lon", "radius_km"])
                for var, lat, lon, r in circle_rows:
                    w.writerow([var, _fmt(lat), _fmt(lon), _fmt(r)])
    manifest = {
        "schema_version": 1,
        "n_cells": len(ordered),
        "n_failures": len(failures),
        "failures": failures,
        "methods": sorted({c.method for c in ordered}),
        "years": sorted({c.fold_year for c in ordered}),
        "seeds": sorted({c.seed for c in ordered}),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return failures


def _artifact_circles(artifact):
    docs = []
    if artifact["kind"] == "linear":
        docs = [d for d in artifact["features"] if d["type"] == "circle"]
    else:
        docs = [d for d in (artifact.get("best_terms") or []) if d["type"] == "circle"]
        if not docs:
            for ind in artifact.get("front", []):
                docs.extend(d for d in ind["terms"] if d["type"] == "circle")
    return [(d["var"], d["lat"], d["lon"], d["radius_km"]) for d in docs]


def cmd_run(args) -> int:
    doc = _load_json(args.config)
    if doc.get("schema_version", 1) != 1:
        raise InvalidConfigError("unsupported config schema_version")
    if "methods" not in doc or not doc["methods"]:
        raise InvalidConfigError("config must list at least one method")
    raster, response, truth = _load_dataset(doc.get("dataset", {}), args.paper_shape)
    specs = [_method_spec(m, args.paper_shape) for m in doc["methods"]]
    seeds = [int(s) for s in doc.get("seeds", [0])]
    jobs = args.jobs if args.jobs is not None else int(doc.get("jobs", 1))
    _ensure_outdir(args.out, args.overwrite)
    folds = make_folds(raster.day_year)
    cells = run_experiment(specs, raster, response, folds, seeds, jobs=jobs)
    failures = _write_results(args.out, cells)
    if truth is not None:
        truth.to_json(os.path.join(args.out, "truth.json"))
    if failures:
        print(f"{len(failures)} of {len(cells)} cells failed; see manifest.json",
              file=sys.stderr)
        return EXIT_PARTIAL
    print(f"wrote {len(cells)} cells to {args.out}")
    return EXIT_OK


class _StoredCell:
    """Minimal stand-in for CellResult rebuilt from a results directory."""

    def __init__(self, method, fold_year, seed, preds_path):
        self.method = method
        self.fold_year = fold_year
        self.seed = seed
        self.error = None
        days, actual, pred = [], [], []
        with open(preds_path, newline="") as fh:
            for rec in csv.DictReader(fh):
                actual.append(float(rec["actual"]))
                pred.append(float(rec["pred"]))
        self.actuals = np.array(actual)
        self.predictions = np.array(pred)


def _load_cells(results_dir, methods=None):
    manifest_path = os.path.join(results_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise MissingCellError(f"no manifest.json in {results_dir}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    cells = []
    preds_dir = os.path.join(results_dir, "preds")
    for name in sorted(os.listdir(preds_dir)):
        stem = name[: -len(".csv")]
        method, year, seed = stem.rsplit("_", 2)
        if methods is not None and method not in methods:
            continue
        cells.append(_StoredCell(method, int(year), int(seed),
                                 os.path.join(preds_dir, name)))
    return manifest, cells


def cmd_stats(args) -> int:
    method_a, method_b = [m.strip() for m in args.pair.split(",")]
    manifest, cells = _load_cells(args.results, methods={method_a, method_b})
    rows = yearly_comparison(cells, method_a, method_b)
    out_path = args.out or os.path.join(args.results, "stats.csv")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["year", "p_raw", "p_bonferroni", "winner"])
        for r in rows:
            w.writerow([r["year"], _fmt(r["p_raw"]), _fmt(r["p_bonferroni"]), r["winner"]])
    print(f"wrote {len(rows)} rows to {out_path}")
    return EXIT_OK


def cmd_importance(args) -> int:
    models_dir = os.path.join(args.results, "models")
    if not os.path.isdir(models_dir):
        raise MissingCellError(f"no models directory in {args.results}")
    artifacts = []
    for name in sorted(os.listdir(models_dir)):
        stem = name[: -len(".json")]
        method, _, _ = stem.rsplit("_", 2)
        if method == args.method:
            with open(os.path.join(models_dir, name)) as fh:
                artifacts.append(json.load(fh))
    if not artifacts:
        raise MissingCellError(f"no stored models for method {args.method!r}")
    grid, n_vars = _grid_from_results(args.results)
    imap = importance_from_artifacts(artifacts, grid, n_vars)
    for v in range(n_vars):
        path = os.path.join(args.results, f"heatmap_{args.method}_var{v}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for r in range(grid.rows):
                w.writerow(
                    [
                        _fmt(imap.values[v, r, c]) if imap.used[v, r, c] else "NA"
                        for c in range(grid.cols)
                    ]
                )
    print(f"wrote {n_vars} heatmaps to {args.results}")
    return EXIT_OK


def _grid_from_results(results_dir):
    """Recover grid geometry from the run config stored alongside results."""
    cfg_path = os.path.join(results_dir, "run_config.json")
    if not os.path.exists(cfg_path):
        raise MissingCellError(
            f"{results_dir} has no run_config.json; cannot recover the grid"
        )
    doc = _load_json(cfg_path)
    dataset = doc.get("dataset", {})
    if "generator" in dataset:
        cfg = config_from_dict(dataset["generator"])
        return cfg.grid(), cfg.n_vars
    raster = load_raster(dataset["raster"])
    return raster.grid, raster.n_vars


def build_parser():
    p = argparse.ArgumentParser(prog="gevr",
                                description="Spatially aggregated raster features: "
                                            "generation, experiments, statistics")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic raster/response dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--overwrite", action="store_true")
    g.add_argument("--paper-shape", action="store_true")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run the configured experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--overwrite", action="store_true")
    r.add_argument("--jobs", type=int, default=None)
    r.add_argument("--paper-shape", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("stats", help="yearly Wilcoxon/Bonferroni comparison")
    s.add_argument("--results", required=True)
    s.add_argument("--pair", default="GPESA,SL")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_stats)

    i = sub.add_parser("importance", help="export importance heatmap CSVs")
    i.add_argument("--results", required=True)
    i.add_argument("--method", required=True)
    i.set_defaults(func=cmd_importance)
    return p


def run_cli(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
        # run stores its config for later stats/importance commands
        if args.command == "run" and code in (EXIT_OK, EXIT_PARTIAL):
            with open(args.config) as fh:
                doc = json.load(fh)
            with open(os.path.join(args.out, "run_config.json"), "w") as fh:
                json.dump(doc, fh, indent=2)
        return code
    except InvalidConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RasterFormatError, MissingCellError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GevrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():  # console entry point
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
