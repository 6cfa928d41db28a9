"""Full comparison sweep from a JSON config, with smoothed loss curves.

Writes one report per run, ``aggregate.csv`` and ``loss/loss_*.csv`` under
the output directory, then prints the aggregate table.

    python scripts/run_sweep.py --problem diffreact --tasks 4 --iterations 500 --out runs/dr
    python scripts/run_sweep.py --config my_sweep.json
"""

import argparse
from pathlib import Path

from atlpinn import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="JSON config; the flags below are ignored when given")
    ap.add_argument("--problem", default="diffreact", choices=["diffreact", "burgers", "swe"])
    ap.add_argument("--tasks", type=int, default=4)
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--smooth-sigma", type=float, default=20.0)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    if args.config:
        config = harness.ExperimentConfig.load(args.config)
    else:
        config = harness.ExperimentConfig(args.problem, task_count=args.tasks, iterations=args.iterations,
                                          workers=args.workers)
    out = Path(args.out or config.output_dir)
    reports, table = harness.compare(config, out)
    for r in reports:
        if r.loss_history["total"]:
            name = harness.run_filename(r).replace("run_", "loss_").replace(".jsonl", ".csv")
            (out / "loss").mkdir(exist_ok=True)
            harness.write_loss_csv(r, out / "loss" / name, sigma=args.smooth_sigma)

    print(f"{'mode':6s} {'variant':7s} {'mean_l2':>10s} {'boost %':>8s} {'wins':>9s} {'failed':>6s}")
    for row in table.rows:
        print(f"{row.mode:6s} {row.variant:7s} {row.mean_l2:10.4g} {row.mean_boost_pct:8.2f} "
              f"{row.wins:4d}/{row.tasks:<4d} {row.failed:6d}")


if __name__ == "__main__":
    main()
