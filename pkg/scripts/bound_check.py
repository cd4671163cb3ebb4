"""How loose is the mean-embedding bound? Summarise exact EMD against the bound per vocabulary size."""

import sys

import numpy as np

from safetune.evalsuite.experiments import verify_bound

instances = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
print(f"{'|V|':>4} {'violations':>10} {'mean emd':>10} {'mean bound':>11} {'bound/emd':>10}")
for n in (4, 8, 16, 32, 64):
    rows = verify_bound(instances, n, seed=0)
    emd = np.array([r["exact_emd"] for r in rows])
    lb = np.array([r["lower_bound"] for r in rows])
    bad = int((lb > emd + 1e-9).sum())
    ratio = np.median(lb[emd > 0] / emd[emd > 0])
    print(f"{n:>4} {bad:>10} {emd.mean():>10.4f} {lb.mean():>11.3e} {ratio:>10.2e}")
