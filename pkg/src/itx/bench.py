"""Wall-time scaling of the decomposed attention mechanisms against dense patch attention."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import attention as A
from . import grad as G
from .tensorcore import WindowSpec

MECHANISMS = ("local", "global", "frame", "local+global", "dense")


@dataclass
class BenchRow:
    mechanism: str
    size: int
    pixels: int
    seconds: float


def _params(C: int, heads: int, n_bias: int, rng) -> dict:
    p = {f"{n}.{k}": rng.standard_normal((C, C, 3, 3) if k == "w" else (C,)).astype(np.float32) * 0.1
         for n in "qkv" for k in "wb"}
    if n_bias:
        p["bias"] = np.zeros((heads, n_bias), np.float32)
    return p


def _best_time(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def time_mechanisms(size: int, window: int = 8, patch: int = 2, channels: int = 16, frames: int = 1,
                    repeats: int = 3, dense: bool = True, seed: int = 0) -> list[BenchRow]:
    """Best-of-``repeats`` forward time of each mechanism on a (1, C, F, size, size) input."""
    rng = np.random.default_rng(seed)
    ws = WindowSpec(window, patch)
    x = rng.standard_normal((1, channels, frames, size, size)).astype(np.float32)
    grid = (-(-size // window),) * 2
    cfgs = {k: A.AttentionConfig(k[0].upper(), channels, 1, ws, True, grid) for k in ("local", "global", "frame")}
    params = {k: _params(channels, 1, c.bias_table_size() if c.use_bias else 0, rng) for k, c in cfgs.items()}
    rows = []
    with G.no_grad():
        for k in ("local", "global", "frame"):
            t = _best_time(lambda: A.attend(x, cfgs[k], params[k]), repeats)
            rows.append(BenchRow(k, size, size * size, t))
        rows.append(BenchRow("local+global", size, size * size, rows[0].seconds + rows[1].seconds))
        if dense:
            t = _best_time(lambda: A.dense_patch_attention(x, patch, dtype=np.float32), max(1, repeats // 2))
            rows.append(BenchRow("dense", size, size * size, t))
    return rows


def run_bench(sizes, threads: int = 1, **kw) -> list[BenchRow]:
    rows = []
    with threadpool_limits(limits=threads):
        time_mechanisms(min(sizes), **{**kw, "repeats": 1})  # warm-up
        for s in sizes:
            rows.extend(time_mechanisms(s, **kw))
    return rows


def fit_exponent(pixels, seconds) -> float:
    """Slope of log(time) against log(pixel count)."""
    lp, lt = np.log(np.asarray(pixels, float)), np.log(np.asarray(seconds, float))
    return float(np.polyfit(lp, lt, 1)[0])


def exponents(rows: list[BenchRow]) -> dict[str, float]:
    out = {}
    for mech in MECHANISMS:
        sel = [r for r in rows if r.mechanism == mech]
        if len(sel) >= 2:
            out[mech] = fit_exponent([r.pixels for r in sel], [r.seconds for r in sel])
    return out


def write_bench_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mechanism", "size", "pixels", "seconds"])
        for r in rows:
            w.writerow([r.mechanism, r.size, r.pixels, f"{r.seconds:.6g}"])


def write_exponent_csv(path, exps: dict[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mechanism", "exponent"])
        for k, v in exps.items():
            w.writerow([k, f"{v:.4f}"])
