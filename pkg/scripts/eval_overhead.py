#!/usr/bin/env python3
"""Measure per-evaluation cost of circle-terminal trees vs feature-matrix
trees, with the spatial index on and off."""
import argparse

from gevr.evaluate import benchmark_overhead
from gevr.raster import make_folds
from gevr.synthetic import GeneratorConfig, generate_synthetic


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=32)
    ap.add_argument("--cols", type=int, default=32)
    ap.add_argument("--days", type=int, default=400)
    ap.add_argument("--trees", type=int, default=40)
    args = ap.parse_args()

    config = GeneratorConfig(rows=args.rows, cols=args.cols, n_days=args.days)
    raster, _, _ = generate_synthetic(config, 0)
    fold = make_folds(raster.day_year)[0]
    out = benchmark_overhead(raster, fold, n_trees=args.trees)
    print(f"feature-matrix terminals : {out['sgp_per_eval'] * 1e3:8.3f} ms/eval")
    print(f"circle terminals (index) : {out['gpesa_indexed_per_eval'] * 1e3:8.3f} ms/eval"
          f"  ({out['ratio_indexed']:.1f}x)")
    print(f"circle terminals (naive) : {out['gpesa_naive_per_eval'] * 1e3:8.3f} ms/eval"
          f"  ({out['ratio_naive']:.1f}x)")


if __name__ == "__main__":
    main()
