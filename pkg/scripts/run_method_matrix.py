"""Run every training method over a few seeds and print the comparison table.

Usage: python scripts/run_method_matrix.py --config configs/synthetic.toml --seeds 0 1 2
"""
import argparse
import logging
import os
import sys
from pathlib import Path

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from advfedkd.config import load_config, override
from advfedkd.export import compare_runs, format_table, write_comparison
from advfedkd.federation import METHODS
from advfedkd.runner import run_experiment


def main():
    parser = argparse.ArgumentParser(description="Method x seed matrix")
    parser.add_argument("--config", type=str, default=None)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--methods", nargs="+", default=list(METHODS), choices=list(METHODS))
    parser.add_argument("--out", type=str, default="runs/matrix")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    base = load_config(args.config)
    summaries = []
    for method in args.methods:
        for seed in args.seeds:
            cfg = override(base, "fed.method", method)
            cfg = override(cfg, "seed", seed)
            cfg = override(cfg, "label", method)
            cfg = override(cfg, "output.dir", str(Path(args.out) / f"{method}-seed{seed}"))
            print(f"  - {method}, seed {seed}")
            summaries.append(run_experiment(cfg).out_dir / "summary.json")

    table = compare_runs(summaries)
    print(format_table(table))
    path = write_comparison(table, Path(args.out) / "comparison.csv")
    print(f"Saved table to {path}")


if __name__ == "__main__":
    main()
