#!/usr/bin/env python3
"""End-to-end demo: generate a small synthetic dataset, run a desk-scale
experiment, then derive statistics and importance heatmaps.

Writes everything under --workdir (default ./demo_out). Takes a couple of
minutes on a laptop.
"""
import argparse
import json
import os
import sys

from gevr.cli import run_cli

RUN_CONFIG = {
    "schema_version": 1,
    "dataset": {
        "generator": {
            "rows": 16,
            "cols": 16,
            "n_days": 240,
            "years": [2000, 2001, 2002],
            "noise_std": 0.1,
            "noise_relative": True,
        },
        "seed": 7,
    },
    "methods": [
        {"family": "SL"},
        {"family": "FL", "R": 2},
        {"family": "GPESA", "gp": {"population_size": 60, "generations": 20, "n_runs": 2}},
    ],
    "seeds": [0, 1, 2],
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--workdir", default="demo_out")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    os.makedirs(args.workdir, exist_ok=True)
    cfg_path = os.path.join(args.workdir, "run_config_input.json")
    with open(cfg_path, "w") as fh:
        json.dump(RUN_CONFIG, fh, indent=2)
    results = os.path.join(args.workdir, "results")

    steps = [
        ["run", "--config", cfg_path, "--out", results, "--overwrite",
         "--jobs", str(args.jobs)],
        ["stats", "--results", results, "--pair", "GPESA,SL"],
        ["importance", "--results", results, "--method", "GPESA"],
        ["importance", "--results", results, "--method", "FL2"],
    ]
    for argv in steps:
        print("+ gevr", " ".join(argv))
        code = run_cli(argv)
        if code != 0:
            sys.exit(code)
    print(f"done; inspect {results}/results.csv, stats.csv and heatmap_*.csv")


if __name__ == "__main__":
    main()
