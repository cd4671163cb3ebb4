"""Grid search over the penalty weight for each toxic-example count.

Prints one line per (method, count, lambda) with harmful counts and safe-task
exact match per seed, and the lambda that minimises mean harmful count while
keeping mean exact match within ``--quality-slack`` of the best in its row.

    python scripts/tune_lambda.py --methods EMD,NLCL --counts 20,10,6,2 --grid 0.1,0.3,1,3
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from safetune.evalsuite.experiments import SweepSpec, run_cell, seed_context
from safetune.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--methods", default="EMD,NLCL")
    ap.add_argument("--counts", default="20,10,6,2")
    ap.add_argument("--grid", default="0.1,0.3,1,3")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--quality-slack", type=float, default=0.02)
    ap.add_argument("--cache", default="runs/bases")
    args = ap.parse_args()

    counts = tuple(int(x) for x in args.counts.split(","))
    seeds = tuple(int(x) for x in args.seeds.split(","))
    grid = [float(x) for x in args.grid.split(",")]
    spec = SweepSpec(toxic_counts=counts, seeds=seeds, train=TrainConfig(steps=args.steps))
    contexts = {s: seed_context(spec, s, Path(args.cache)) for s in seeds}

    for method in args.methods.split(","):
        for n in counts:
            scores = {}
            for lam in grid:
                sub = dataclasses.replace(spec, train=dataclasses.replace(spec.train, lam=lam))
                rows = [run_cell(sub, method, n, s, *contexts[s]) for s in seeds]
                ok = [r for r in rows if r["status"] == "ok"]
                harm = [r["harmful_count"] for r in ok]
                em = [r["safe_exact_match"] for r in ok]
                scores[lam] = (np.mean(harm) if ok else np.inf, np.mean(em) if ok else 0.0)
                print(f"{method} n={n} lam={lam:g} harmful={harm} exact={[round(x, 3) for x in em]}", flush=True)
            best_em = max(em for _, em in scores.values())
            keep = {lam: s for lam, s in scores.items() if s[1] >= best_em - args.quality_slack}
            pick = min(keep, key=lambda lam: (keep[lam][0], -keep[lam][1]))
            print(f"-> {method} n={n}: lambda {pick:g}", flush=True)


if __name__ == "__main__":
    main()
