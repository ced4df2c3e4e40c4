"""Time the attention mechanisms against dense attention and fit log-log growth exponents.

    python3 scripts/bench.py --sizes 32 64 128 256
"""
import argparse

from itx import bench as B

p = argparse.ArgumentParser()
p.add_argument("--sizes", type=int, nargs="+", default=[32, 64, 128, 256])
p.add_argument("--repeats", type=int, default=3)
p.add_argument("--no-dense", action="store_true")
p.add_argument("--csv")
args = p.parse_args()

rows = B.run_bench(args.sizes, repeats=args.repeats, dense=not args.no_dense)
for r in rows:
    print(f"{r.mechanism:>13} {r.size:5d} {r.seconds * 1e3:10.2f} ms")
for mech, e in B.exponents(rows).items():
    print(f"exponent {mech:>13}: {e:.3f}")
if args.csv:
    B.write_bench_csv(args.csv, rows)
