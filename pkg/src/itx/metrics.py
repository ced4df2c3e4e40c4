"""Image quality and agreement statistics on magnitude images."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAX_VAL = 2048.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CR_Z = 1.645


def magnitude(x, imag=None) -> np.ndarray:
    """sqrt(re^2 + im^2) for a ComplexSeries, a (B, 2, F, H, W) array, or separate planes."""
    if imag is not None:
        re, im = np.asarray(x, np.float64), np.asarray(imag, np.float64)
    elif hasattr(x, "real") and hasattr(x, "imag") and not isinstance(x, np.ndarray):
        re, im = np.asarray(x.real, np.float64), np.asarray(x.imag, np.float64)
    else:
        x = np.asarray(x, np.float64)
        if x.ndim != 5 or x.shape[1] != 2:
            raise ValueError(f"expected a 2-channel [B, 2, F, H, W] array, got {x.shape}")
        re, im = x[:, 0], x[:, 1]
    return np.hypot(re, im)


def display_scale(gt: np.ndarray, max_val: float = MAX_VAL) -> float:
    """Factor mapping the ground-truth maximum onto max_val."""
    return max_val / float(np.max(gt))


def psnr(pred, gt, max_val: float = MAX_VAL) -> float:
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = np.mean((pred - gt) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(max_val ** 2 / mse))


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-r ** 2 / (2 * sigma ** 2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = k.size
    out = sliding_window_view(img, n, axis=-1) @ k
    return sliding_window_view(out, n, axis=-2) @ k


def ssim_map(pred, gt, dynamic_range: float = MAX_VAL) -> np.ndarray:
    x = np.asarray(pred, np.float64)
    y = np.asarray(gt, np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.shape[-1] < SSIM_WIN or x.shape[-2] < SSIM_WIN:
        raise ValueError(f"SSIM needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape[-2:]}")
    k = gaussian_window()
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    mx, my = _filter_valid(x, k), _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mx * mx
    syy = _filter_valid(y * y, k) - my * my
    sxy = _filter_valid(x * y, k) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(pred, gt, dynamic_range: float = MAX_VAL) -> float:
    """Mean Gaussian-window SSIM (11x11, sigma 1.5), averaged over all leading (frame) axes."""
    m = ssim_map(pred, gt, dynamic_range)
    return float(m.mean(axis=(-1, -2)).mean())


def cnr(img, blood_mask, myo_mask, sigma: float = 1.0) -> float:
    img = np.asarray(img, np.float64)
    blood_mask = np.asarray(blood_mask, bool)
    myo_mask = np.asarray(myo_mask, bool)
    if not blood_mask.any() or not myo_mask.any():
        raise ValueError("CNR masks must be non-empty")
    if (blood_mask & myo_mask).any():
        raise ValueError("CNR masks must be disjoint")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return float((img[blood_mask].mean() - img[myo_mask].mean()) / sigma)


def bland_altman(a, b) -> tuple[float, float]:
    """(mean of a - b, width of the mean +/- 1.645 SD band using the sample SD)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError("paired lists differ in length")
    if a.size < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    return float(d.mean()), float(2 * CR_Z * d.std(ddof=1))


@dataclass
class MetricsReport:
    case: str
    target_snr: float
    psnr_db: float
    ssim: float
    cnr_in: float
    cnr_out: float
    cnr_gt: float
    psnr_in_db: float = math.nan
    ssim_in: float = math.nan


REPORT_COLUMNS = ["case", "target_snr", "psnr_db", "ssim", "cnr_in", "cnr_out", "cnr_gt"]


def write_report_csv(path, reports: list[MetricsReport], extra: bool = True) -> None:
    cols = [f.name for f in fields(MetricsReport)] if extra else REPORT_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in reports:
            w.writerow(asdict(r))


def write_bland_altman_csv(path, rows: list[tuple[str, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep", "mean_dev", "cr90"])
        w.writerows(rows)
