"""Command line entry point: ``atlpinn generate|train|compare|report``.

Exit codes: 0 on success, 1 for configuration errors, 2 when some runs
failed (their reports and the aggregate are still written).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .errors import AggregationError, ConfigError, ContractError, FormatError
from .pde import KINDS

log = logging.getLogger("atlpinn")

EXIT_OK, EXIT_CONFIG, EXIT_FAILED_RUNS = 0, 1, 2


def _generate(args) -> int:
    tasks = harness.generate_tasks(args.problem, args.tasks, args.seed, args.resolution)
    path = harness.write_tasks(tasks, args.problem, args.seed, args.out)
    log.info("wrote %d tasks and %s", len(tasks), path)
    return EXIT_OK


def _train(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    modes = [args.mode] if args.mode else list(config.modes)
    pairs = harness.make_pairs(config)
    if not 0 <= args.task_id < len(pairs):
        raise ConfigError(f"task id {args.task_id} outside [0, {len(pairs)})")
    pair = pairs[args.task_id]
    reports = []
    for mode in modes:
        flag = args.cosine and mode != "single"
        if args.cosine and mode == "single" and args.mode:
            raise ConfigError("--cosine needs a two-task mode")
        report = harness.train_task(config, pair, mode, flag)
        log.info("%s/%s task %d: l2=%s", mode, report.variant, report.task_id, report.relative_l2)
        reports.append(report)
    harness.write_reports(reports, args.out or config.output_dir)
    return EXIT_FAILED_RUNS if any(r.failed for r in reports) else EXIT_OK


def _compare(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    out = Path(args.out or config.output_dir)
    reports, table = harness.compare(config, out)
    for row in table.rows:
        log.info("%-6s %-4s mean_l2=%.4g boost=%.2f%% wins=%d/%d failed=%d", row.mode, row.variant,
                 row.mean_l2, row.mean_boost_pct, row.wins, row.tasks, row.failed)
    return EXIT_FAILED_RUNS if any(r.failed for r in reports) else EXIT_OK


def _report(args) -> int:
    reports = harness.read_reports(args.inp)
    if not reports:
        raise FileNotFoundError(f"no run reports under {args.inp}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        name = harness.run_filename(r).replace("run_", "loss_").replace(".jsonl", ".csv")
        harness.write_loss_csv(r, out / name, sigma=args.smooth_sigma)
    log.info("wrote %d loss histories to %s", len(reports), out)
    return EXIT_FAILED_RUNS if any(r.failed for r in reports) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atlpinn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="solve reference grids for random initial conditions")
    g.add_argument("--problem", choices=KINDS, required=True)
    g.add_argument("--tasks", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--resolution", type=int, nargs="+", default=None,
                   help="grid size N_x N_t (or N_x N_y N_t); desk size by default")
    g.set_defaults(func=_generate)

    t = sub.add_parser("train", help="train one task under one or more modes")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=harness.MODES)
    t.add_argument("--cosine", action="store_true", help="enable the gradient cosine gate")
    t.add_argument("--task-id", type=int, default=0)
    t.add_argument("--out", default=None)
    t.set_defaults(func=_train)

    c = sub.add_parser("compare", help="full sweep and aggregate table")
    c.add_argument("--config", required=True)
    c.add_argument("--out", default=None)
    c.set_defaults(func=_compare)

    r = sub.add_parser("report", help="loss-history CSVs from run reports")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--smooth-sigma", type=float, default=None)
    r.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, FormatError, AggregationError, FileNotFoundError) as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
