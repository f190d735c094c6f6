import argparse
import logging
import sys
from pathlib import Path

from .config import apply_overrides, load_config, parse_value
from .exceptions import AdvFedKDError
from .export import format_table, write_comparison, write_json, compare_runs
from .runner import evaluate_checkpoint, pretrain, run_experiment, sweep

logger = logging.getLogger("advfedkd")


def _config(args):
    """Config file plus the command-line overrides."""
    config = load_config(args.config)
    return apply_overrides(config, {
        "seed": args.seed,
        "output.dir": args.out,
        "fed.threads": getattr(args, "threads", None),
    })


def cmd_pretrain_teacher(args):
    config = _config(args)
    print(f"Pretraining teacher {config.model.teacher_hidden} for {config.teacher.epochs} epoch(s)...")
    path, report = pretrain(config, args.checkpoint)
    print(f"  - clean accuracy: {report['clean_accuracy']:.2f}%")
    for name, acc in report["robust_accuracies"].items():
        print(f"  - {name}: {acc:.2f}%")
    print(f"Saved teacher to {path}")


def cmd_run(args):
    config = _config(args)
    print(f"Running {config.fed.method} ({config.fed.rounds} rounds, "
          f"{config.partition.num_clients} clients, seed {config.seed})...")
    result = run_experiment(config)
    s = result.summary
    robust = "n/a" if s["average_robust"] is None else f"{s['average_robust']:.2f}%"
    clean = "n/a" if s["clean_accuracy"] is None else f"{s['clean_accuracy']:.2f}%"
    print(f"RESULT: Clean = {clean} | Avg Robust = {robust} | Comm Params = {s['comm_params_total']}")
    print(f"Saved outputs to {result.out_dir}")


def cmd_eval(args):
    config = _config(args)
    row = evaluate_checkpoint(config, args.checkpoint)
    print(f"Evaluation of {args.checkpoint}")
    print("-" * 40)
    print(f"Clean accuracy: {row.clean_accuracy:.2f}%")
    for name, acc in row.robust_accuracies.items():
        print(f"  {name}: {acc:.2f}%")
    if row.average_robust is not None:
        print(f"Average robust: {row.average_robust:.2f}%")
    if args.output:
        write_json({
            "checkpoint": str(args.checkpoint),
            "clean_accuracy": row.clean_accuracy,
            "robust_accuracies": row.robust_accuracies,
            "average_robust": row.average_robust,
        }, args.output)
        print(f"Saved results to {args.output}")


def cmd_compare(args):
    table = compare_runs(args.summaries, average=not args.per_run)
    print(format_table(table))
    if args.output:
        write_comparison(table, args.output)
        print(f"Saved table to {args.output}")


def cmd_sweep(args):
    config = _config(args)
    values = [parse_value(v) for v in args.values]
    print(f"Sweeping {args.key} over {values}...")
    table = sweep(config, args.key, values)
    print(format_table(table))
    print(f"Saved table to {Path(config.output.dir) / 'comparison.csv'}")


def _add_run_flags(p, threads=True):
    p.add_argument("--config", type=str, default=None, help="TOML config file (defaults apply when omitted)")
    p.add_argument("--seed", type=int, default=None, help="Master seed (overrides config)")
    p.add_argument("--out", type=str, default=None, help="Output directory (overrides output.dir)")
    if threads:
        p.add_argument("--threads", type=int, default=None, help="Client worker threads; 1 = strict determinism")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Federated adversarial learning with distillation")
    parser.add_argument("--log-level", type=str, default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level")
    subparsers = parser.add_subparsers(dest="command", required=True)

    # PRETRAIN-TEACHER
    p_pre = subparsers.add_parser("pretrain-teacher", help="Adversarially pretrain the teacher")
    _add_run_flags(p_pre, threads=False)
    p_pre.add_argument("--checkpoint", type=str, default=None, help="Checkpoint path (default <out>/teacher.ckpt)")
    p_pre.set_defaults(func=cmd_pretrain_teacher)

    # RUN
    p_run = subparsers.add_parser("run", help="Run one federated experiment")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    # EVAL
    p_eval = subparsers.add_parser("eval", help="Evaluate a saved checkpoint")
    _add_run_flags(p_eval, threads=False)
    p_eval.add_argument("--checkpoint", type=str, required=True, help="Model checkpoint")
    p_eval.add_argument("--output", type=str, default=None, help="Optional JSON output file")
    p_eval.set_defaults(func=cmd_eval)

    # COMPARE
    p_cmp = subparsers.add_parser("compare", help="Tabulate run summaries")
    p_cmp.add_argument("summaries", nargs="+", help="summary.json files")
    p_cmp.add_argument("--per-run", action="store_true", help="Do not average runs sharing a label")
    p_cmp.add_argument("--output", type=str, default=None, help="Optional CSV output file")
    p_cmp.set_defaults(func=cmd_compare)

    # SWEEP
    p_sw = subparsers.add_parser("sweep", help="Repeat a run over values of one config key")
    _add_run_flags(p_sw)
    p_sw.add_argument("--key", type=str, required=True, help="Dotted config key, e.g. distill.rho")
    p_sw.add_argument("--values", nargs="+", required=True, help="Values to assign to the key")
    p_sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except AdvFedKDError as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"Error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
