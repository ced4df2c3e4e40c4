"""Desk-scale experiments shared by the scripts and the acceptance suite."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


from . import metrics as M
from . import mrsim
from .model import Model, ModelConfig
from .train import TrainConfig, TrainResult, train


@dataclass
class DeskRun:
    """One training run on synthetic phantom pairs."""
    block_spec: str = "FLG"
    size: int = 32
    frames: int = 4
    channels: int = 16
    dropout: float = 0.1
    n_pairs: int = 200
    snr_range: tuple[float, float] = (0.5, 2.0)
    steps: int = 600
    peak_lr: float = 1e-3
    batch_size: int = 1
    val_fraction: float = 0.05
    model_seed: int = 0
    data_seed: int = 1
    train_seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(C=self.channels, block_spec=self.block_spec, dropout=self.dropout,
                           image_size=(self.size, self.size))

    def phantom(self) -> mrsim.PhantomSpec:
        return mrsim.PhantomSpec(H=self.size, W=self.size, F=self.frames)

    def train_config(self) -> TrainConfig:
        per_epoch = max(1, self.n_pairs - max(1, round(self.val_fraction * self.n_pairs)))
        epochs = -(-self.steps * self.batch_size // per_epoch)
        return TrainConfig(epochs=epochs, batch_size=self.batch_size, peak_lr=self.peak_lr,
                           val_fraction=self.val_fraction, seed=self.train_seed, max_steps=self.steps)


def run_desk(run: DeskRun, data=None, checkpoint=None) -> tuple[Model, TrainResult]:
    """Train and return the model holding its best-validation weights."""
    if data is None:
        data = mrsim.training_pairs(run.n_pairs, run.phantom(), run.snr_range, seed=run.data_seed)
    model = Model(run.model_config(), run.model_seed)
    res = train(model, data, run.train_config(), checkpoint=checkpoint)
    model.params.assign(res.best_params)
    return model, res


def denoise_series(model: Model, x: mrsim.ComplexSeries, g: mrsim.GFactorMap, nn: float) -> mrsim.ComplexSeries:
    a = mrsim.input_scale(x, g, nn)
    return mrsim.from_model_output(model.predict(mrsim.to_model_input(x, g, nn, a)), a)


def sweep_reports(model: Model, gt: mrsim.ComplexSeries, blood, myo, ladder) -> list[M.MetricsReport]:
    """Per-level metrics for an iterable of (name, noisy, g, nn, target).

    Magnitudes are compared at display scale (peak of the ground truth at
    MAX_VAL); CNR is measured on per-pixel SNR maps.
    """
    gm = gt.magnitude()
    s = M.display_scale(gm)
    reports = []
    for name, x, g, nn, target in ladder:
        y = denoise_series(model, x, g, nn)
        im, om = x.magnitude(), y.magnitude()
        cnr = lambda m: M.cnr(mrsim.snr_map(m, nn, g), blood, myo)
        reports.append(M.MetricsReport(
            case=name, target_snr=target,
            psnr_db=M.psnr(om * s, gm * s), ssim=M.ssim(om * s, gm * s),
            cnr_in=cnr(im), cnr_out=cnr(om), cnr_gt=cnr(gm),
            psnr_in_db=M.psnr(im * s, gm * s), ssim_in=M.ssim(im * s, gm * s)))
    return reports


@dataclass
class LadderEval:
    reports: list[M.MetricsReport] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [dataclasses.asdict(r) for r in self.reports]


def evaluate_ladder(model: Model, spec: mrsim.PhantomSpec, R: float = 4.0, seed: int = 123,
                    targets=mrsim.DEFAULT_TARGETS) -> LadderEval:
    """Metrics on a held-out phantom corrupted at each ladder level."""
    gt, blood, myo = mrsim.gen_phantom(spec)
    g = mrsim.gen_gfactor(R, spec.H, spec.W)
    levels = mrsim.make_snr_ladder(gt, g, mrsim.NoiseLadder(targets, seed))
    ladder = [(f"snr{lv.target:g}", lv.noisy, g, lv.nn, lv.target) for lv in levels]
    return LadderEval(sweep_reports(model, gt, blood, myo, ladder))


def trend_failures(ev: LadderEval, min_level: float = 0.5, dssim: float = 0.10, dpsnr: float = 3.0) -> list[str]:
    """Every violated denoising-trend condition, as readable strings."""
    bad = []
    for r in ev.reports:
        if r.target_snr >= min_level:
            if r.ssim - r.ssim_in < dssim:
                bad.append(f"SNR {r.target_snr:g}: SSIM gain {r.ssim - r.ssim_in:+.3f} < {dssim}")
            if r.psnr_db - r.psnr_in_db < dpsnr:
                bad.append(f"SNR {r.target_snr:g}: PSNR gain {r.psnr_db - r.psnr_in_db:+.2f} dB < {dpsnr}")
        if r.cnr_out <= r.cnr_in:
            bad.append(f"SNR {r.target_snr:g}: CNR {r.cnr_out:.3f} <= input {r.cnr_in:.3f}")
    return bad


def scaling_trial(seeds=(0, 1, 2), specs=("FLG", "FLGFLG"), **run_kw) -> dict[str, list[float]]:
    """Best validation loss per block spec, one entry per seed, identical data and schedule."""
    out: dict[str, list[float]] = {s: [] for s in specs}
    for seed in seeds:
        base = DeskRun(**{**run_kw, "model_seed": seed, "data_seed": 100 + seed, "train_seed": seed})
        data = mrsim.training_pairs(base.n_pairs, base.phantom(), base.snr_range, seed=base.data_seed)
        for spec in specs:
            _, res = run_desk(dataclasses.replace(base, block_spec=spec), data)
            out[spec].append(res.best_val)
    return out


def format_table(ev: LadderEval) -> str:
    lines = [f"{'SNR':>6} {'PSNR in':>8} {'PSNR out':>9} {'SSIM in':>8} {'SSIM out':>9} "
             f"{'CNR in':>7} {'CNR out':>8} {'CNR gt':>7}"]
    for r in ev.reports:
        lines.append(f"{r.target_snr:6g} {r.psnr_in_db:8.2f} {r.psnr_db:9.2f} {r.ssim_in:8.3f} {r.ssim:9.3f} "
                     f"{r.cnr_in:7.3f} {r.cnr_out:8.3f} {r.cnr_gt:7.3f}")
    return "\n".join(lines)
