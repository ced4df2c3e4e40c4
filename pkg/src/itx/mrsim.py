"""Synthetic cine data: phantom series, g-factor maps, SNR-unit noise and the SNR ladder.

Images are in SNR units: the ground truth is treated as already normalised to
unit noise SD, so adding noise of SD ``nn * g`` yields a per-pixel SNR of
``|x| / sqrt(1 + (nn * g)^2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorcore import DTYPE, load_itx, save_itx

DEFAULT_TARGETS = (0.05, 0.1, 0.2, 0.5, 0.75, 1.0, 1.5, 2.0, 4.0, 8.0)
FOREGROUND_FRACTION = 0.1


class InfeasibleTarget(ValueError):
    pass


@dataclass
class ComplexSeries:
    real: np.ndarray  # (F, H, W)
    imag: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.real = np.asarray(self.real, dtype=DTYPE)
        self.imag = np.asarray(self.imag, dtype=DTYPE)
        if self.real.shape != self.imag.shape or self.real.ndim != 3:
            raise ValueError(f"real {self.real.shape} and imag {self.imag.shape} must be matching (F, H, W)")

    @property
    def shape(self):
        return self.real.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real.astype(np.float64), self.imag)

    def save(self, prefix) -> tuple[Path, Path]:
        prefix = str(prefix)
        paths = Path(prefix + "_real.itx"), Path(prefix + "_imag.itx")
        save_itx(paths[0], self.real[None, None])
        save_itx(paths[1], self.imag[None, None])
        return paths

    @classmethod
    def load(cls, prefix) -> "ComplexSeries":
        prefix = str(prefix)
        re = load_itx(prefix + "_real.itx")
        im = load_itx(prefix + "_imag.itx")
        return cls(re[0, 0], im[0, 0])


@dataclass
class GFactorMap:
    g: np.ndarray  # (H, W)
    R: float


@dataclass
class PhantomSpec:
    H: int = 32
    W: int = 32
    F: int = 4
    blood: float = 105.7
    myocardium: float = 37.0
    background: float = 8.0
    # radii as fractions of min(H, W)
    blood_radius: float = 0.2
    myo_thickness: float = 0.12
    body_radius: float = 0.46
    beat: float = 0.15
    phase_scale: float = 1.0
    # max random offset of the heart centre, as a fraction of min(H, W)
    jitter: float = 0.046875
    seed: int = 0

    def __post_init__(self):
        if not self.blood > self.myocardium > self.background >= 0:
            raise ValueError("need blood > myocardium > background >= 0")
        if not 0 <= self.beat < 1:
            raise ValueError("beat amplitude must lie in [0, 1)")
        if min(self.H, self.W, self.F) < 1:
            raise ValueError("H, W and F must be positive")


def _coverage(dist: np.ndarray, radius: float) -> np.ndarray:
    return (dist <= radius).mean(axis=(-1, -2))


def gen_phantom(spec: PhantomSpec, supersample: int = 4):
    """Beating disc (blood) inside a ring (myocardium) inside a body disc.

    Returns (series, blood_mask, myo_mask); masks are (F, H, W) booleans that
    mark pixels lying entirely inside their region.
    """
    rng = np.random.default_rng(spec.seed)
    H, W, F = spec.H, spec.W, spec.F
    size = min(H, W)
    cy = H / 2 + rng.uniform(-spec.jitter, spec.jitter) * size
    cx = W / 2 + rng.uniform(-spec.jitter, spec.jitter) * size
    rb0 = spec.blood_radius * size
    ro0 = rb0 + spec.myo_thickness * size
    rbody = spec.body_radius * size
    if ro0 + math.hypot(cy - H / 2, cx - W / 2) > rbody or rbody > size / 2:
        raise ValueError("phantom geometry exceeds the image bounds")

    s = supersample
    sub = (np.arange(s) + 0.5) / s
    yy = np.arange(H)[:, None, None, None] + sub[None, None, :, None]
    xx = np.arange(W)[None, :, None, None] + sub[None, None, None, :]
    d_heart = np.hypot(yy - cy, xx - cx)
    d_body = np.hypot(yy - H / 2, xx - W / 2)
    body = _coverage(d_body, rbody)

    Y, X = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    a = rng.uniform(-1, 1, size=4) * spec.phase_scale
    phase = a[0] * np.pi + a[1] * X + a[2] * Y + a[3] * X * Y

    real = np.empty((F, H, W), DTYPE)
    imag = np.empty((F, H, W), DTYPE)
    blood_mask = np.zeros((F, H, W), bool)
    myo_mask = np.zeros((F, H, W), bool)
    for f in range(F):
        contraction = spec.beat * (1 - math.cos(2 * math.pi * f / F)) / 2
        rb = rb0 * (1 - contraction)
        ro = math.sqrt(rb ** 2 + ro0 ** 2 - rb0 ** 2)  # myocardial area is conserved
        inner = _coverage(d_heart, rb)
        outer = _coverage(d_heart, ro)
        myo = outer - inner
        bg = body - outer
        mag = spec.blood * inner + spec.myocardium * myo + spec.background * bg
        real[f] = mag * np.cos(phase)
        imag[f] = mag * np.sin(phase)
        blood_mask[f] = inner == 1.0
        myo_mask[f] = myo == 1.0
    return ComplexSeries(real, imag), blood_mask, myo_mask


def gen_gfactor(R: float, H: int, W: int) -> GFactorMap:
    """Centre-peaked noise amplification: 1 + (R-1) exp(-r^2 / 2 sigma^2), sigma = min(H, W)/4."""
    if R < 1:
        raise ValueError("acceleration R must be >= 1")
    sigma = min(H, W) / 4
    y, x = np.mgrid[0:H, 0:W]
    r2 = (y - H // 2) ** 2 + (x - W // 2) ** 2
    g = 1.0 + (R - 1.0) * np.exp(-r2 / (2 * sigma ** 2))
    return GFactorMap(g.astype(np.float64), float(R))


def add_mr_noise(x: ComplexSeries, nn: float, g: GFactorMap, seed) -> ComplexSeries:
    if nn < 0:
        raise ValueError("noise SD must be non-negative")
    if nn == 0:
        return ComplexSeries(x.real.copy(), x.imag.copy(), x.spacing)
    rng = np.random.default_rng(seed)
    sd = nn * g.g
    re = x.real + sd * rng.standard_normal(x.shape)
    im = x.imag + sd * rng.standard_normal(x.shape)
    return ComplexSeries(re, im, x.spacing)


def foreground(x: ComplexSeries, fraction: float = FOREGROUND_FRACTION) -> np.ndarray:
    mag = x.magnitude()
    return mag > fraction * mag.max()


def noise_sd_map(nn: float, g: GFactorMap) -> np.ndarray:
    """Per-pixel noise SD after adding noise of SD ``nn * g`` to unit-SD data."""
    return np.sqrt(1.0 + (nn * g.g) ** 2)


def snr_map(img: np.ndarray, nn: float, g: GFactorMap) -> np.ndarray:
    """Express a (F, H, W) magnitude stack in units of its per-pixel noise SD."""
    return np.asarray(img, np.float64) / noise_sd_map(nn, g)


def global_median_snr(x: ComplexSeries, nn: float, g: GFactorMap, fg: np.ndarray | None = None) -> float:
    if nn < 0:
        raise ValueError("noise SD must be non-negative")
    if fg is None:
        fg = foreground(x)
    if not fg.any():
        raise ValueError("empty foreground")
    return float(np.median(snr_map(x.magnitude(), nn, g)[fg]))


def solve_noise_sd(x: ComplexSeries, g: GFactorMap, target_snr: float, rtol: float = 1e-9) -> float:
    """Added noise SD that brings the global median SNR down to ``target_snr``.

    The median SNR is continuous and strictly decreasing in nn, so plain
    bisection converges; ``rtol`` bounds the relative bracket width on nn.
    """
    fg = foreground(x)
    current = global_median_snr(x, 0.0, g, fg)
    if math.isclose(target_snr, current, rel_tol=1e-12):
        return 0.0
    if target_snr > current or target_snr <= 0:
        raise InfeasibleTarget(f"target SNR {target_snr} is not below the current median SNR {current:.4g}")
    lo, hi = 0.0, 1.0
    while global_median_snr(x, hi, g, fg) > target_snr:
        lo, hi = hi, hi * 2
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if global_median_snr(x, mid, g, fg) > target_snr:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class NoiseLadder:
    targets: tuple[float, ...] = DEFAULT_TARGETS
    seed: int = 0
    nn: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.targets = tuple(float(t) for t in self.targets)
        if not self.targets or any(b <= a for a, b in zip(self.targets, self.targets[1:])):
            raise ValueError("ladder targets must be non-empty and strictly increasing")

    def level_seeds(self) -> list[int]:
        children = np.random.SeedSequence(self.seed).spawn(len(self.targets))
        return [int(c.generate_state(1)[0]) for c in children]


@dataclass
class LadderLevel:
    target: float
    nn: float
    seed: int
    measured: float
    noisy: ComplexSeries


def make_snr_ladder(x: ComplexSeries, g: GFactorMap, ladder: NoiseLadder) -> list[LadderLevel]:
    levels = []
    fg = foreground(x)
    for target, seed in zip(ladder.targets, ladder.level_seeds()):
        nn = solve_noise_sd(x, g, target)
        measured = global_median_snr(x, nn, g, fg)
        levels.append(LadderLevel(target, nn, seed, measured, add_mr_noise(x, nn, g, seed)))
    ladder.nn = [lv.nn for lv in levels]
    return levels


# --- model I/O ------------------------------------------------------------


def noise_scale(nn: float) -> float:
    """Global noise SD of a series in SNR units after adding noise of SD nn."""
    return math.sqrt(1.0 + nn * nn)


def input_scale(x: ComplexSeries, g: GFactorMap, nn: float) -> float:
    """Estimated RMS signal level of a noisy series.

    The known added noise power 2 (nn g)^2 is subtracted from the mean power, so
    the estimate does not drift with the noise level.  A small fraction of the
    raw power is kept as a floor for very noisy inputs.
    """
    sd = noise_sd_map(nn, g)
    power = x.real.astype(np.float64) ** 2 + x.imag.astype(np.float64) ** 2
    clean = float(np.mean(power - 2.0 * (sd ** 2 - 1.0)))
    return math.sqrt(max(clean, 1e-3 * float(power.mean())))


def to_model_input(x: ComplexSeries, g: GFactorMap, nn: float, scale: float | None = None) -> np.ndarray:
    """(1, 3, F, H, W) input: real, imag and the per-pixel noise SD, all divided by ``scale``."""
    if scale is None:
        scale = input_scale(x, g, nn)
    F = x.shape[0]
    sd = np.broadcast_to(noise_sd_map(nn, g), (F,) + g.g.shape)
    return (np.stack([x.real, x.imag, sd])[None] / scale).astype(DTYPE)


def to_model_target(x: ComplexSeries, scale: float) -> np.ndarray:
    return (np.stack([x.real, x.imag])[None] / scale).astype(DTYPE)


def from_model_output(y: np.ndarray, scale: float) -> ComplexSeries:
    return ComplexSeries(y[0, 0] * scale, y[0, 1] * scale)


def training_pairs(n: int, spec: PhantomSpec, snr_range=(0.5, 2.0), R_range=(2.0, 5.0), seed: int = 0):
    """n (input, target) pairs from randomised phantoms at random SNR and acceleration."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        ps = PhantomSpec(**{**spec.__dict__, "seed": int(rng.integers(1 << 31)),
                            "blood": spec.blood * rng.uniform(0.8, 1.2),
                            "myocardium": spec.myocardium * rng.uniform(0.8, 1.2),
                            "blood_radius": spec.blood_radius * rng.uniform(0.8, 1.2),
                            "beat": float(rng.uniform(0.0, 0.3))})
        gt, _, _ = gen_phantom(ps)
        g = gen_gfactor(float(rng.uniform(*R_range)), ps.H, ps.W)
        target = float(np.exp(rng.uniform(np.log(snr_range[0]), np.log(snr_range[1]))))
        nn = solve_noise_sd(gt, g, target, rtol=1e-4)
        noisy = add_mr_noise(gt, nn, g, int(rng.integers(1 << 31)))
        a = input_scale(noisy, g, nn)
        pairs.append((to_model_input(noisy, g, nn, a), to_model_target(gt, a)))
    return pairs
