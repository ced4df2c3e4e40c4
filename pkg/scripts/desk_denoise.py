"""Train the desk FLG model on phantom pairs and print the held-out ladder table.

    python3 scripts/desk_denoise.py --steps 2000 --out runs/desk_denoise
"""
import argparse
import csv
import logging
from pathlib import Path

from threadpoolctl import threadpool_limits

from itx import experiments as E

p = argparse.ArgumentParser()
p.add_argument("--steps", type=int, default=2000)
p.add_argument("--pairs", type=int, default=400)
p.add_argument("--dropout", type=float, default=0.1)
p.add_argument("--lr", type=float, default=1e-3)
p.add_argument("--ladder-seed", type=int, default=123)
p.add_argument("--out", default="runs/desk_denoise")
args = p.parse_args()

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
run = E.DeskRun(steps=args.steps, n_pairs=args.pairs, dropout=args.dropout, peak_lr=args.lr)
with threadpool_limits(1):
    model, res = E.run_desk(run, checkpoint=out / "checkpoint.itxp")
    ev = E.evaluate_ladder(model, run.phantom(), seed=args.ladder_seed)
print(E.format_table(ev))
with open(out / "ladder.csv", "w", newline="") as fh:
    w = csv.DictWriter(fh, fieldnames=list(ev.rows()[0]))
    w.writeheader()
    w.writerows(ev.rows())
bad = E.trend_failures(ev)
print("trend holds at every level" if not bad else "\n".join(bad))
