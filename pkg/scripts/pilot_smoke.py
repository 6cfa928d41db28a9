"""Desk-scale Diffusion-Reaction smoke: one task pair, all nine configurations.

Prints one line per run (relative L2, loss ratio, wall time) and writes the
run reports plus an aggregate CSV. Used to pin the smoke fixture.

    python scripts/pilot_smoke.py --out runs/smoke
"""

import argparse
import time

from atlpinn import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--iterations", type=int, default=2_000)
    ap.add_argument("--task-id", type=int, default=0)
    args = ap.parse_args()

    config = harness.desk_smoke_config(iterations=args.iterations, output_dir=args.out)
    pair = harness.make_pairs(config)[args.task_id]
    print(f"main task {pair.main.task_id}: {pair.main.ic}")
    print(f"aux task  {pair.aux.task_id}: {pair.aux.ic}")
    reports = []
    for mode, flag in harness.run_configurations(config):
        t0 = time.perf_counter()
        r = harness.train_task(config, pair, mode, flag)
        reports.append(r)
        hist = r.loss_history["total"]
        ratio = hist[-1] / hist[0] if hist else float("nan")
        print(f"{mode:6s} {r.variant:4s} failed={r.failed} l2={r.relative_l2} "
              f"loss {hist[0]:.4g} -> {hist[-1]:.4g} (ratio {ratio:.4f}) "
              f"aux_applied={r.aux_applied} {time.perf_counter() - t0:.0f}s", flush=True)
    harness.write_reports(reports, args.out)
    harness.write_aggregate_csv(harness.aggregate(reports), f"{args.out}/aggregate.csv")


if __name__ == "__main__":
    main()
