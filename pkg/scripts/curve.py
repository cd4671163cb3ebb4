"""Safety level against over-refusal along EMD and STL fine-tunes of one dataset.

    python scripts/curve.py [seed] [n_toxic]
"""

import sys

from safetune.corpus import DatasetSpec, build_dataset
from safetune.evalsuite.experiments import curve_checkpoints, over_refusal_curve
from safetune.trainer import TrainConfig, base_for, default_heldout

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
n_toxic = int(sys.argv[2]) if len(sys.argv) > 2 else 20

cfg = TrainConfig(method="EMD", seed=seed)
data = build_dataset(DatasetSpec(n_toxic=n_toxic, seed=seed))
cks = curve_checkpoints(cfg, data, base_for(cfg), methods=("EMD", "NLCL", "STL"))
for p in over_refusal_curve(cks, default_heldout(seed, data), training=data):
    print(f"{p['series']:>5} step {p['step']:>5}  safety {p['safety_level']:.3f}  over-refusal {p['over_refusal']:.3f}  "
          f"safe exact {p['safe_exact_match']:.3f}")
