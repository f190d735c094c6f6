"""Ablation rows for the distillation components on one config.

    VKD only           method = vkd
    VKD + AKD          method = pm_afl_pp, fed.alignment = false
    VKD + AKD + ALG    method = pm_afl_pp

A single pretrained teacher checkpoint is shared by all rows.

Usage: python scripts/run_ablations.py --config configs/synthetic.toml --seeds 0 1 2
"""
import argparse
import logging
import os
import sys
from pathlib import Path

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from advfedkd.config import load_config, override
from advfedkd.export import compare_runs, format_table, write_comparison
from advfedkd.runner import pretrain, run_experiment

ROWS = {
    "vkd": {"fed.method": "vkd"},
    "vkd+akd": {"fed.method": "pm_afl_pp", "fed.alignment": False},
    "vkd+akd+alg": {"fed.method": "pm_afl_pp"},
    "fedpgd": {"fed.method": "fedpgd"},
}


def main():
    parser = argparse.ArgumentParser(description="Distillation ablation table")
    parser.add_argument("--config", type=str, default=None)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0])
    parser.add_argument("--out", type=str, default="runs/ablation")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    out = Path(args.out)
    base = load_config(args.config)
    summaries = []
    for seed in args.seeds:
        cfg = override(base, "seed", seed)
        if cfg.teacher.load is None:
            ckpt, report = pretrain(cfg, out / f"teacher-seed{seed}" / "teacher.ckpt")
            print(f"Teacher seed {seed}: clean {report['clean_accuracy']:.2f}%")
            cfg = override(cfg, "teacher.load", str(ckpt))
        for label, settings in ROWS.items():
            run_cfg = override(cfg, "label", label)
            for key, value in settings.items():
                run_cfg = override(run_cfg, key, value)
            run_cfg = override(run_cfg, "output.dir", str(out / f"{label}-seed{seed}"))
            print(f"  - {label}, seed {seed}")
            summaries.append(run_experiment(run_cfg).out_dir / "summary.json")

    table = compare_runs(summaries)
    print(format_table(table))
    write_comparison(table, out / "comparison.csv")


if __name__ == "__main__":
    main()
