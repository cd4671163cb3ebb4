"""Data-efficiency sweep at the default configuration; writes sweep.csv and the table.

    python scripts/run_sweep.py --out runs/sweep --jobs 3
"""

import argparse
from pathlib import Path

from safetune.evalsuite.experiments import SweepSpec, data_efficiency_sweep, sweep_csv, sweep_table
from safetune.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--methods", default="EMD,NLCL,STL")
    ap.add_argument("--counts", default="20,10,6,2")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    spec = SweepSpec(
        toxic_counts=tuple(int(x) for x in args.counts.split(",")),
        methods=tuple(args.methods.split(",")),
        seeds=tuple(int(x) for x in args.seeds.split(",")),
        train=TrainConfig(steps=args.steps),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = data_efficiency_sweep(spec, jobs=args.jobs, base_cache=out / "bases")
    (out / "sweep.csv").write_text(sweep_csv(rows))
    table = sweep_table(rows)
    (out / "sweep_table.txt").write_text(table)
    print(table, end="")


if __name__ == "__main__":
    main()
