"""5D tensor primitives.

Every array handled here is a dense ``[B, C, F, H, W]`` ndarray (float32 by
default, float64 when gradients are being verified).  The functions are pure:
they never modify their inputs.

Patch vectors are flattened channel-major, then pixel raster order inside the
patch: element ``(c, i, j)`` of a ``p x p`` patch lands at ``c*p*p + i*p + j``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor dimensions violate an operation's contract."""


def check5d(x: np.ndarray, name: str = "x") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 5:
        raise ShapeError(f"{name} must be a 5D [B, C, F, H, W] array, got {getattr(x, 'shape', type(x))}")
    return x


@dataclass(frozen=True)
class WindowSpec:
    w: int = 8
    p: int = 2

    def __post_init__(self):
        if self.w <= 0 or self.p <= 0 or self.w % self.p:
            raise ShapeError(f"patch size {self.p} must divide window size {self.w}")

    @property
    def q(self) -> int:
        """Patches per window side."""
        return self.w // self.p

    @property
    def P(self) -> int:
        return self.q * self.q

    def grid(self, H: int, W: int) -> tuple[int, int]:
        """Window grid (rows, cols) for an H x W frame."""
        if H % self.w or W % self.w:
            raise ShapeError(f"frame {H}x{W} is not divisible by window {self.w}")
        return H // self.w, W // self.w

    def N(self, H: int, W: int) -> int:
        nh, nw = self.grid(H, W)
        return nh * nw


LAYOUTS = ("Local", "Global", "Frame")


@dataclass
class DataMatrixSet:
    """Stack of attention data matrices plus what is needed to undo the assembly.

    ``matrices`` shapes:
      Local  -> (B, F, N, P, C*p*p)   one P-row matrix per (batch, frame, window)
      Global -> (B, F, P, N, C*p*p)   one N-row matrix per (batch, frame, patch position)
      Frame  -> (B, F, C*H*W)         one F-row matrix per batch
    """

    layout: str
    matrices: np.ndarray
    shape: tuple | None = None
    ws: WindowSpec | None = None

    def row_index(self) -> np.ndarray:
        """Map every row back to its source coordinates.

        Returns an int array with the matrix axes' shape (all but the last) and
        a trailing axis of ``(frame, window, patch)``; for Frame the window and
        patch entries are -1.
        """
        if self.shape is None:
            raise ShapeError("data matrix set has no source shape recorded")
        B, _, F = self.shape[:3]
        if self.layout == "Frame":
            idx = np.full((B, F, 3), -1)
            idx[..., 0] = np.arange(F)
            return idx
        N = self.ws.N(*self.shape[3:])
        P = self.ws.P
        f, n, pp = np.meshgrid(np.arange(F), np.arange(N), np.arange(P), indexing="ij")
        idx = np.stack([f, n, pp], axis=-1)
        if self.layout == "Global":
            idx = idx.transpose(0, 2, 1, 3)
        return np.broadcast_to(idx, (B,) + idx.shape).copy()


# --- data matrix assembly -------------------------------------------------


def _split_windows(shape, ws: WindowSpec):
    B, C, F, H, W = shape
    nh, nw = ws.grid(H, W)
    q, p = ws.q, ws.p
    return (B, C, F, nh, q, p, nw, q, p), nh * nw


def local_rows(x: np.ndarray, ws: WindowSpec) -> np.ndarray:
    B, C, F, H, W = x.shape
    split, N = _split_windows(x.shape, ws)
    t = x.reshape(split).transpose(0, 2, 3, 6, 4, 7, 1, 5, 8)
    return t.reshape(B, F, N, ws.P, C * ws.p * ws.p)


def local_unrows(rows: np.ndarray, shape, ws: WindowSpec) -> np.ndarray:
    B, C, F, H, W = shape
    _, nh, q, p, nw = _split_windows(shape, ws)[0][2:7]
    t = rows.reshape(B, F, nh, nw, q, q, C, p, p).transpose(0, 6, 1, 2, 4, 7, 3, 5, 8)
    return t.reshape(shape)


def global_rows(x: np.ndarray, ws: WindowSpec) -> np.ndarray:
    B, C, F, H, W = x.shape
    split, N = _split_windows(x.shape, ws)
    t = x.reshape(split).transpose(0, 2, 4, 7, 3, 6, 1, 5, 8)
    return t.reshape(B, F, ws.P, N, C * ws.p * ws.p)


def global_unrows(rows: np.ndarray, shape, ws: WindowSpec) -> np.ndarray:
    B, C, F, H, W = shape
    _, nh, q, p, nw = _split_windows(shape, ws)[0][2:7]
    t = rows.reshape(B, F, q, q, nh, nw, C, p, p).transpose(0, 6, 1, 4, 2, 7, 5, 3, 8)
    return t.reshape(shape)


def frame_rows(x: np.ndarray) -> np.ndarray:
    B, C, F, H, W = x.shape
    return x.transpose(0, 2, 1, 3, 4).reshape(B, F, C * H * W)


def frame_unrows(rows: np.ndarray, shape) -> np.ndarray:
    B, C, F, H, W = shape
    return rows.reshape(B, F, C, H, W).transpose(0, 2, 1, 3, 4)


def assemble_local(x: np.ndarray, ws: WindowSpec) -> DataMatrixSet:
    check5d(x)
    return DataMatrixSet("Local", np.ascontiguousarray(local_rows(x, ws)), x.shape, ws)


def assemble_global(x: np.ndarray, ws: WindowSpec) -> DataMatrixSet:
    check5d(x)
    return DataMatrixSet("Global", np.ascontiguousarray(global_rows(x, ws)), x.shape, ws)


def assemble_frame(x: np.ndarray) -> DataMatrixSet:
    check5d(x)
    if x.shape[2] < 1:
        raise ShapeError("frame attention needs at least one frame")
    return DataMatrixSet("Frame", np.ascontiguousarray(frame_rows(x)), x.shape)


def scatter_inverse(d: DataMatrixSet) -> np.ndarray:
    if d.shape is None or d.layout not in LAYOUTS or (d.layout != "Frame" and d.ws is None):
        raise ShapeError("incomplete data matrix metadata")
    if d.layout == "Local":
        return local_unrows(d.matrices, d.shape, d.ws)
    if d.layout == "Global":
        return global_unrows(d.matrices, d.shape, d.ws)
    return frame_unrows(d.matrices, d.shape)


# --- convolution, normalisation, activation -------------------------------


def _cols(x: np.ndarray, k: int = 3) -> np.ndarray:
    """im2col for a stride-1, zero-pad-1 3x3 kernel: (B,C,F,H,W) -> (C*9, B*F*H*W)."""
    B, C, F, H, W = x.shape
    xp = np.pad(x.transpose(1, 0, 2, 3, 4), ((0, 0),) * 3 + ((1, 1), (1, 1)))
    cols = np.stack([xp[..., i:i + H, j:j + W] for i in range(k) for j in range(k)], axis=1)
    return cols.reshape(C * k * k, B * F * H * W)


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Per-frame 3x3 convolution (cross-correlation), stride 1, zero padding 1."""
    check5d(x)
    B, C, F, H, W = x.shape
    Co, Ci = weight.shape[:2]
    if Ci != C or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv weight {weight.shape} does not fit input with {C} channels")
    out = weight.reshape(Co, -1) @ _cols(x)
    if bias is not None:
        out += bias.reshape(Co, 1)
    return out.reshape(Co, B, F, H, W).transpose(1, 0, 2, 3, 4)


def _col2im(gcols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _cols: (C*9, B*F*H*W) -> (B,C,F,H,W)."""
    B, C, F, H, W = shape
    g = gcols.reshape(C, 9, B, F, H, W)
    gp = np.zeros((C, B, F, H + 2, W + 2), dtype=gcols.dtype)
    for k in range(9):
        i, j = divmod(k, 3)
        gp[..., i:i + H, j:j + W] += g[:, k]
    return gp[..., 1:H + 1, 1:W + 1].transpose(1, 0, 2, 3, 4)


def conv2d_backward(gy: np.ndarray, x: np.ndarray, weight: np.ndarray, cols: np.ndarray | None = None):
    """Gradients of conv2d w.r.t. (x, weight, bias) given output gradient gy."""
    Co = weight.shape[0]
    if cols is None:
        cols = _cols(x)
    g2 = gy.transpose(1, 0, 2, 3, 4).reshape(Co, -1)
    gw = (g2 @ cols.T).reshape(weight.shape)
    gb = g2.sum(axis=1)
    gx = _col2im(weight.reshape(Co, -1).T @ g2, x.shape)
    return gx, gw, gb


LN_EPS = 1e-5


def layer_norm(x: np.ndarray, gain: np.ndarray, offset: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """Normalise over (C, H, W) separately for every (batch, frame), then per-channel affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xhat, _ = _ln_core(x, eps)
    C = x.shape[1]
    return xhat * gain.reshape(1, C, 1, 1, 1) + offset.reshape(1, C, 1, 1, 1)


def _ln_core(x: np.ndarray, eps: float):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=(1, 3, 4), keepdims=True)
    var = x64.var(axis=(1, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return ((x64 - mu) * inv).astype(x.dtype), inv.astype(x.dtype)


def prelu(x: np.ndarray, slope: np.ndarray) -> np.ndarray:
    s = np.asarray(slope, dtype=x.dtype).reshape(1, -1, 1, 1, 1)
    return np.where(x >= 0, x, s * x)


# --- resolution changes ---------------------------------------------------


def patch_merge(x: np.ndarray) -> np.ndarray:
    """Fold every 2x2 neighbourhood into channels: (B,C,F,H,W) -> (B,4C,F,H/2,W/2).

    Output channel ``4c + 2*dy + dx`` holds input channel c at offset (dy, dx).
    """
    check5d(x)
    B, C, F, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"patch merge needs even H and W, got {H}x{W}")
    t = x.reshape(B, C, F, H // 2, 2, W // 2, 2).transpose(0, 1, 4, 6, 2, 3, 5)
    return t.reshape(B, 4 * C, F, H // 2, W // 2)


def patch_unmerge(y: np.ndarray) -> np.ndarray:
    B, C4, F, h, w = y.shape
    t = y.reshape(B, C4 // 4, 2, 2, F, h, w).transpose(0, 1, 4, 5, 2, 6, 3)
    return t.reshape(B, C4 // 4, F, 2 * h, 2 * w)


def patch_merge_down(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    return conv2d(patch_merge(x), weight, bias)


def interp_matrix(n: int, dtype=DTYPE) -> np.ndarray:
    """(2n x n) bilinear 2x upsampling operator, half-pixel centres, edge clamped."""
    src = (np.arange(2 * n) + 0.5) / 2 - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((2 * n, n))
    rows = np.arange(2 * n)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def upsample2x(x: np.ndarray) -> np.ndarray:
    check5d(x)
    H, W = x.shape[3:]
    uh = interp_matrix(H, x.dtype)
    uw = interp_matrix(W, x.dtype)
    return np.matmul(np.matmul(uh, x), uw.T)


def upsample_linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    return conv2d(upsample2x(x), weight, bias)


# --- padding --------------------------------------------------------------


class PadRecord(NamedTuple):
    h: tuple[int, int]
    w: tuple[int, int]


def reflect_index(n: int, pad: int) -> np.ndarray:
    """Source indices of a length-n axis reflect-padded by ``pad`` at the end."""
    idx = np.arange(n + pad)
    if n == 1:
        return np.zeros(n + pad, dtype=int)
    period = 2 * (n - 1)
    m = idx % period
    return np.where(m < n, m, period - m)


def pad_to_window(x: np.ndarray, ws: WindowSpec) -> tuple[np.ndarray, PadRecord]:
    check5d(x)
    H, W = x.shape[3:]
    ph = (-H) % ws.w
    pw = (-W) % ws.w
    rec = PadRecord((0, ph), (0, pw))
    if ph == 0 and pw == 0:
        return x, rec
    y = x.take(reflect_index(H, ph), axis=3).take(reflect_index(W, pw), axis=4)
    return y, rec


def crop(x: np.ndarray, rec: PadRecord) -> np.ndarray:
    H = x.shape[3] - rec.h[0] - rec.h[1]
    W = x.shape[4] - rec.w[0] - rec.w[1]
    return x[..., rec.h[0]:rec.h[0] + H, rec.w[0]:rec.w[0] + W]


# --- ITX files ------------------------------------------------------------


def save_itx(path, x: np.ndarray) -> None:
    x = check5d(np.asarray(x))
    header = json.dumps({"dims": list(x.shape), "dtype": "f32"}, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def load_itx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        dims = [int(d) for d in header["dims"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: not an ITX tensor file") from exc
    if header.get("dtype") != "f32" or len(dims) != 5:
        raise ValueError(f"{path}: unsupported ITX header {header}")
    data = np.frombuffer(raw[nl + 1:], dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload has {data.size} values, header says {dims}")
    return data.reshape(dims).astype(DTYPE)
