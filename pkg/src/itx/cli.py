"""Command-line entry point: ``itx <verb> [flags]``.

Verbs write into ``<out>/<verb>/`` and finish by writing ``manifest.json``
listing inputs, seeds and the sha256 of every output.  The hashes are re-read
from disk before exit; any failure prints one JSON line on stderr and exits
nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as B
from . import metrics as M
from . import mrsim
from .config import RunConfig, load_config
from .experiments import denoise_series, sweep_reports
from .model import ConfigError, Model, ParamLoadError, load_param_file, load_params, save_params
from .tensorcore import ShapeError, load_itx, save_itx
from .train import train as run_training
from .train import write_loss_csv

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_SHAPE = 4
EXIT_FAIL = 1


class MissingInput(RuntimeError):
    pass


class VerifyError(RuntimeError):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Outputs:
    """Tracks files written by one command and verifies them against the manifest."""

    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)
        if not os.access(root, os.W_OK):
            raise PermissionError(f"output directory '{root}' is not writable")
        self.files: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        self.files.append(p)
        return p

    def finish(self, command: str, seeds: dict, inputs: list, extra: dict | None = None) -> Path:
        hashes = {p.name: sha256(p) for p in self.files}
        manifest = {
            "command": command,
            "seeds": seeds,
            "inputs": {str(p): sha256(p) for p in map(Path, inputs)},
            "outputs": hashes,
        }
        manifest.update(extra or {})
        mpath = self.root / "manifest.json"
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        again = json.loads(mpath.read_text())["outputs"]
        for name, digest in again.items():
            if sha256(self.root / name) != digest:
                raise VerifyError(f"output '{name}' changed after writing")
        return mpath


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInput(f"{what} not found at '{path}'")
    return path


def _levels(text: str | None):
    if text is None:
        return None
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"--levels: cannot parse '{text}'") from exc
    if not vals:
        raise ConfigError("--levels: empty list")
    return tuple(sorted(vals))


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.phantom = dataclasses.replace(cfg.phantom, seed=args.seed)
        cfg.ladder = dataclasses.replace(cfg.ladder, seed=args.seed)
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        cfg.data = dataclasses.replace(cfg.data, seed=args.seed)
    if args.lr is not None:
        cfg.train = dataclasses.replace(cfg.train, peak_lr=args.lr)
    lv = _levels(args.levels)
    if lv is not None:
        cfg.ladder = dataclasses.replace(cfg.ladder, targets=lv)
    if args.checkpoint is not None:
        cfg.checkpoint = args.checkpoint
    return cfg


# --- verbs -------------------------------------------------------------------


def cmd_phantom(cfg: RunConfig, args) -> Path:
    out = Outputs(Path(cfg.out) / "phantom")
    gt, blood, myo = mrsim.gen_phantom(cfg.phantom)
    gt.save(out.root / "gt")
    out.path("gt_real.itx")
    out.path("gt_imag.itx")
    save_itx(out.path("blood.itx"), blood[None, None].astype(np.float32))
    save_itx(out.path("myo.itx"), myo[None, None].astype(np.float32))
    return out.finish("phantom", {"phantom": cfg.phantom.seed}, [],
                      {"phantom": dataclasses.asdict(cfg.phantom)})


def _load_phantom(cfg: RunConfig):
    root = Path(cfg.out) / "phantom"
    _require(root / "manifest.json", "phantom manifest (run 'itx phantom' first)")
    gt = mrsim.ComplexSeries.load(root / "gt")
    blood = load_itx(root / "blood.itx")[0, 0] > 0.5
    myo = load_itx(root / "myo.itx")[0, 0] > 0.5
    return gt, blood, myo, [root / "gt_real.itx", root / "gt_imag.itx"]


def cmd_corrupt(cfg: RunConfig, args) -> Path:
    gt, _, _, inputs = _load_phantom(cfg)
    F, H, W = gt.shape
    g = mrsim.gen_gfactor(cfg.ladder.R, H, W)
    levels = mrsim.make_snr_ladder(gt, g, mrsim.NoiseLadder(cfg.ladder.targets, cfg.ladder.seed))
    out = Outputs(Path(cfg.out) / "ladder")
    save_itx(out.path("gfactor.itx"), g.g[None, None, None].astype(np.float32))
    entries = []
    for i, lv in enumerate(levels):
        stem = f"level{i:02d}"
        lv.noisy.save(out.root / stem)
        out.path(stem + "_real.itx")
        out.path(stem + "_imag.itx")
        side = {"target": lv.target, "nn": lv.nn, "R": g.R, "seed": lv.seed, "measured": lv.measured}
        out.path(stem + ".json").write_text(json.dumps(side, indent=2) + "\n")
        entries.append({**side, "files": [stem + "_real.itx", stem + "_imag.itx"]})
    return out.finish("corrupt", {"ladder": cfg.ladder.seed}, inputs, {"levels": entries})


def cmd_train(cfg: RunConfig, args) -> Path:
    d = cfg.data
    data = mrsim.training_pairs(d.n_pairs, cfg.phantom, d.snr_range, d.R_range, d.seed)
    model = Model(cfg.model, cfg.seed)
    start, inputs = 0, []
    if args.resume:
        meta = load_params(model, _require(Path(args.resume), "resume checkpoint"))
        start = int(meta.get("step", 0))
        inputs.append(args.resume)
    out = Outputs(Path(cfg.out) / "train")
    save_params(model, out.path("initial.itxp"), {"step": start})
    ckpt = out.path("checkpoint.itxp")
    ckpt.unlink(missing_ok=True)
    res = run_training(model, data, cfg.train, checkpoint=ckpt, start_step=start)
    if not ckpt.exists():
        # no epoch ran (e.g. resuming past the end): keep the current weights
        save_params(model, ckpt, {"step": res.step, "val_loss": None})
    write_loss_csv(out.path("loss.csv"), res.log)
    return out.finish("train", {"model": cfg.seed, "train": cfg.train.seed, "data": d.seed}, inputs,
                      {"final_step": res.step, "best_val": res.best_val,
                       "train_config": dataclasses.asdict(cfg.train)})


def _checkpoint(cfg: RunConfig) -> Path:
    path = Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "train" / "checkpoint.itxp"
    return _require(path, "checkpoint")


def _load_model(cfg: RunConfig) -> tuple[Model, Path]:
    path = _checkpoint(cfg)
    model = Model(cfg.model, 0)
    arrays, _ = load_param_file(path)
    for name, arr in arrays.items():
        if name in model.params and model.params[name].data.shape != arr.shape:
            raise ShapeError(f"checkpoint tensor '{name}' has shape {arr.shape}, "
                             f"config expects {model.params[name].data.shape}")
    load_params(model, path)
    return model, path


def _load_noisy(prefix: Path):
    side = _require(Path(str(prefix) + ".json"), "noise sidecar")
    _require(Path(str(prefix) + "_real.itx"), "input series")
    meta = json.loads(side.read_text())
    x = mrsim.ComplexSeries.load(prefix)
    g = mrsim.gen_gfactor(float(meta["R"]), x.shape[1], x.shape[2])
    return x, g, float(meta["nn"]), meta


def cmd_denoise(cfg: RunConfig, args) -> Path:
    if not args.input:
        raise ConfigError("denoise needs --input PREFIX (e.g. runs/desk/ladder/level03)")
    prefix = Path(args.input)
    x, g, nn, _ = _load_noisy(prefix)
    model, ckpt = _load_model(cfg)
    y = denoise_series(model, x, g, nn)
    out = Outputs(Path(cfg.out) / "denoise")
    stem = prefix.name
    y.save(out.root / stem)
    out.path(stem + "_real.itx")
    out.path(stem + "_imag.itx")
    inputs = [ckpt, str(prefix) + "_real.itx", str(prefix) + "_imag.itx", str(prefix) + ".json"]
    return out.finish("denoise", {}, inputs)


def cmd_sweep(cfg: RunConfig, args) -> Path:
    gt, blood, myo, inputs = _load_phantom(cfg)
    root = Path(cfg.out) / "ladder"
    man = json.loads(_require(root / "manifest.json", "ladder manifest (run 'itx corrupt' first)").read_text())
    model, ckpt = _load_model(cfg)
    ladder = []
    for i, entry in enumerate(man["levels"]):
        stem = f"level{i:02d}"
        x, g, nn, _ = _load_noisy(root / stem)
        ladder.append((stem, x, g, nn, entry["target"]))
        inputs += [root / f for f in entry["files"]]
    reports = sweep_reports(model, gt, blood, myo, ladder)
    out = Outputs(Path(cfg.out) / "sweep")
    M.write_report_csv(out.path("metrics.csv"), reports)
    rows = []
    if len(reports) >= 2:
        for label, col in (("cnr_in_vs_gt", "cnr_in"), ("cnr_out_vs_gt", "cnr_out")):
            mean, cr = M.bland_altman([getattr(r, col) for r in reports], [r.cnr_gt for r in reports])
            rows.append((label, f"{mean:.6g}", f"{cr:.6g}"))
    M.write_bland_altman_csv(out.path("bland_altman.csv"), rows)
    return out.finish("sweep", {}, [ckpt, *inputs])


def cmd_bench(cfg: RunConfig, args) -> Path:
    b = cfg.bench
    rows = B.run_bench(b.sizes, threads=1, window=b.window, patch=b.patch, channels=b.channels,
                       frames=b.frames, repeats=b.repeats, dense=b.dense, seed=cfg.seed)
    exps = B.exponents(rows)
    out = Outputs(Path(cfg.out) / "bench")
    B.write_bench_csv(out.path("bench.csv"), rows)
    B.write_exponent_csv(out.path("exponents.csv"), exps)
    return out.finish("bench", {"bench": cfg.seed}, [], {"exponents": exps, "bench": dataclasses.asdict(b)})


VERBS = {
    "phantom": cmd_phantom,
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="itx", description="Desk-scale imaging transformer denoising toolkit.")
    p.add_argument("verb", choices=sorted(VERBS))
    p.add_argument("--config", help="JSON run config (defaults are used when omitted)")
    p.add_argument("--out", help="output root directory")
    p.add_argument("--seed", type=int, help="overrides every seed in the config")
    p.add_argument("--levels", help="comma-separated target SNR list for corrupt")
    p.add_argument("--lr", type=float, help="peak learning rate for train")
    p.add_argument("--checkpoint", help="parameter file for denoise/sweep")
    p.add_argument("--input", help="noisy series prefix for denoise")
    p.add_argument("--resume", help="checkpoint to resume training from")
    return p


def _error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _error("usage", str(exc), EXIT_USAGE)
    threads = os.environ.get("ITX_THREADS")
    try:
        limit = int(threads) if threads else None
        cfg = resolve_config(args)
        with threadpool_limits(limits=limit):
            manifest = VERBS[args.verb](cfg, args)
    except ConfigError as exc:
        return _error("config", str(exc), EXIT_USAGE)
    except (MissingInput, FileNotFoundError) as exc:
        return _error("missing_input", str(exc), EXIT_INPUT)
    except (ShapeError, ParamLoadError) as exc:
        return _error("shape_mismatch", str(exc), EXIT_SHAPE)
    except mrsim.InfeasibleTarget as exc:
        return _error("infeasible_target", str(exc), EXIT_FAIL)
    except (OSError, VerifyError, ValueError) as exc:
        return _error(type(exc).__name__, str(exc), EXIT_FAIL)
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
