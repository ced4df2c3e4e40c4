"""Train "FLG" and "FLGFLG" desk models on identical data and compare best validation loss.

    python3 scripts/scaling.py --seeds 0 1 2 --steps 2000
"""
import argparse
import logging

import numpy as np
from threadpoolctl import threadpool_limits

from itx import experiments as E

p = argparse.ArgumentParser()
p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
p.add_argument("--steps", type=int, default=2000)
p.add_argument("--size", type=int, default=16)
p.add_argument("--pairs", type=int, default=400)
p.add_argument("--specs", nargs="+", default=["FLG", "FLGFLG"])
args = p.parse_args()

logging.basicConfig(level=logging.WARNING)
with threadpool_limits(1):
    vals = E.scaling_trial(args.seeds, tuple(args.specs), size=args.size, n_pairs=args.pairs, steps=args.steps)
for spec, v in vals.items():
    print(f"{spec:>10}  median {np.median(v):.5f}  per seed {np.round(v, 5).tolist()}")
