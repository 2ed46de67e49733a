"""Command-line entry point: train, sweep, select, report, selftest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .algorithms import ALGORITHMS
from .data import DATA_DIR_ENV, DATASETS
from .records import append_record, read_records
from .reporting import FORMATS, ReportError, aggregate, emit_table, select_all
from .selection import CRITERIA, SelectionError
from .sweep import SweepPlan, _run_cell, load_plan_dataset, plan_cells, run_sweep

# knobs outside the random-search table that runs may still set
EXTRA_KNOBS = {"arch", "mlp_width", "mlp_depth", "mlp_pool", "mldg_inner_lr"}


class UsageError(Exception):
    pass


def _registries() -> str:
    return (
        f"datasets:   {', '.join(DATASETS)}\n"
        f"algorithms: {', '.join(ALGORITHMS)}\n"
        f"criteria:   {', '.join(CRITERIA)}\n"
        f"The data directory falls back to ${DATA_DIR_ENV}."
    )


def _hparams_arg(text: str) -> dict:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as e:
        raise argparse.ArgumentTypeError(f"not valid JSON: {e}") from None
    if not isinstance(value, dict):
        raise argparse.ArgumentTypeError("must be a JSON object")
    return value


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--dataset", required=True, choices=list(DATASETS))
    p.add_argument("--data-dir", help=f"MNIST IDX directory (default ${DATA_DIR_ENV})")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--hparams", type=_hparams_arg, default={}, help="JSON object of hyperparameter overrides")
    p.add_argument("--steps", type=int, help="gradient steps (default: dataset's)")
    p.add_argument("--checkpoint-freq", type=int, help="steps between evaluations (default: dataset's)")
    p.add_argument("--limit", type=int, help="use only the first LIMIT MNIST digits")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgbench",
        description="Domain generalization benchmark harness.",
        epilog=_registries(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model and print per-domain accuracies", epilog=_registries(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_run_flags(p)
    p.add_argument("--algorithm", required=True, choices=list(ALGORITHMS))
    p.add_argument("--test-env", type=int, required=True)
    p.add_argument("--out", help="append the run record to this JSONL file")

    p = sub.add_parser("sweep", help="run a resumable hyperparameter sweep", epilog=_registries(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_run_flags(p)
    p.add_argument("--algorithm", action="append", choices=list(ALGORITHMS),
                   help="repeatable; default is every algorithm")
    p.add_argument("--test-env", type=int, action="append", help="repeatable; default is every domain")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--lodo", action="store_true", help="also run leave-one-domain-out sub-runs")
    p.add_argument("--out", required=True, help="records JSONL file")

    p = sub.add_parser("select", help="apply a selection criterion to a records file")
    p.add_argument("records")
    p.add_argument("--criterion", default="training_domain", choices=list(CRITERIA))

    p = sub.add_parser("report", help="aggregate a records file into a results table")
    p.add_argument("records")
    p.add_argument("--criterion", default="training_domain", choices=list(CRITERIA))
    p.add_argument("--format", default="markdown", choices=FORMATS)
    p.add_argument("--decimals", type=int, default=1)
    p.add_argument("--allow-missing", action="store_true", help="render what is available instead of failing")
    p.add_argument("--out", help="write the table here instead of stdout")

    p = sub.add_parser("selftest", help="gradient checks and quick property checks")
    p.add_argument("--points", type=int, default=3, help="random points per op")
    return parser


def _check_hparams(algorithms, overrides: dict):
    from .hparams import default_hparams

    known = set(EXTRA_KNOBS)
    for a in algorithms:
        known |= set(default_hparams(a))
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise UsageError(f"unknown hyperparameter(s) {unknown}; known: {sorted(known)}")


def _plan(args, algorithms, test_envs, trials=1, reps=1, workers=1, lodo=False) -> SweepPlan:
    _check_hparams(algorithms, args.hparams)
    for flag in ("steps", "checkpoint_freq", "limit"):
        v = getattr(args, flag)
        if v is not None and v < 1:
            raise UsageError(f"--{flag.replace('_', '-')} must be >= 1")
    kwargs = {"limit": args.limit} if args.limit else {}
    try:
        return SweepPlan(
            dataset=args.dataset, algorithms=algorithms, trials=trials, reps=reps, master_seed=args.seed,
            workers=workers, test_envs=test_envs, n_steps=args.steps, checkpoint_freq=args.checkpoint_freq,
            lodo=lodo, overrides=args.hparams, data_dir=args.data_dir, dataset_kwargs=kwargs,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_train(args) -> int:
    plan = _plan(args, [args.algorithm], [args.test_env])
    dataset = load_plan_dataset(plan)
    try:
        (cell,) = plan_cells(plan, dataset)
    except ValueError as e:
        raise UsageError(str(e)) from None
    record = _run_cell(cell, dataset)
    if args.out:
        append_record(args.out, record)
    if record.status != "ok":
        print(f"run {record.status} at step {record.failed_step}: {record.error}", file=sys.stderr)
        return 1
    final = record.checkpoints[-1]
    print(f"{record.algorithm} on {record.dataset}, test domain {record.test_domain}, step {final['step']}")
    for i, name in enumerate(record.domains):
        tag = "test" if i == record.test_env else "train"
        accs = final["accs"][name]
        print(f"  {name:>8} ({tag:5})  train-split {accs['train']:.4f}  val-split {accs['val']:.4f}")
    return 0


def cmd_sweep(args) -> int:
    algorithms = args.algorithm or list(ALGORITHMS)
    plan = _plan(args, algorithms, args.test_env, args.trials, args.reps, args.workers, args.lodo)
    dataset = load_plan_dataset(plan)
    try:
        plan_cells(plan, dataset)
    except ValueError as e:
        raise UsageError(str(e)) from None
    n = run_sweep(plan, args.out, dataset)
    print(f"wrote {n} records to {args.out}")
    return 0


def _load(path) -> list:
    if not Path(path).exists():
        raise FileNotFoundError(f"records file not found: {path}")
    return read_records(path)


def cmd_select(args) -> int:
    chosen = select_all(_load(args.records), args.criterion)
    print("algorithm\tdataset\ttest_env\trep\ttrial\tstep\tscore\ttest_acc")
    for (alg, ds, t, rep), s in chosen.items():
        print(f"{alg}\t{ds}\t{t}\t{rep}\t{s.record.trial}\t{s.step}\t{s.score:.6f}\t{s.test_acc:.6f}")
    return 0


def cmd_report(args) -> int:
    cells = aggregate(_load(args.records), args.criterion, allow_missing=args.allow_missing)
    text = emit_table(cells, args.format, args.decimals)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_selftest(args) -> int:
    from .algorithms import coral_penalty, gaussian_mmd, group_dro_step
    from .autodiff import OPS, Graph, Tensor
    from .autodiff.gradcheck import finite_difference_check, standard_cases

    failures = 0
    worst = {}
    for k in range(args.points):
        for op, (inputs, attrs) in standard_cases(np.random.default_rng(k)).items():
            worst[op] = max(worst.get(op, 0.0), finite_difference_check(op, inputs, attrs, seed=k))
    for op in OPS:
        ok = worst.get(op, np.inf) < 1e-4
        failures += not ok
        print(f"{'ok  ' if ok else 'FAIL'} gradcheck {op:16s} max rel err {worst.get(op, np.inf):.2e}")

    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((16, 8)), rng.standard_normal((16, 8))
    checks = {
        "mmd zero on identical batches": gaussian_mmd(Graph(), Tensor(x), Tensor(x)).item() == 0.0,
        "mmd nonnegative": gaussian_mmd(Graph(), Tensor(x), Tensor(y)).item() >= 0.0,
        "coral zero on identical batches": coral_penalty(Graph(), Tensor(x), Tensor(x)).item() == 0.0,
        "dro weights stay on the simplex": abs(group_dro_step(np.full(3, 1 / 3), [0.1, 2.0, 0.5], 0.5)[0].sum() - 1) < 1e-12,
    }
    for name, ok in checks.items():
        failures += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name}")
    return 1 if failures else 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "select": cmd_select, "report": cmd_report, "selftest": cmd_selftest}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"dgbench: error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"dgbench: {e}", file=sys.stderr)
        return 1
    except (SelectionError, ReportError) as e:
        print(f"dgbench: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("dgbench: interrupted; records file holds only complete lines", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
