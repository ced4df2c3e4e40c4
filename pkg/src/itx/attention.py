"""Spatial local (L), spatial global (G) and frame (F) attention.

All three share the same recipe: 3x3 convolutions produce Q/K/V, the tensors
are rearranged into stacks of data matrices, softmax attention runs on every
matrix (per head), and the result is scattered back to ``[B, C, F, H, W]``.
They differ only in how rows are gathered:

* L: the P = (w/p)^2 patches inside one window,
* G: the patch at one fixed position taken from each of the N windows,
* F: whole frames, one row per frame.
"""
from __future__ import annotations

import functools

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import grad as G
from .grad import Tensor
from .tensorcore import ShapeError, WindowSpec, local_rows, local_unrows

KINDS = ("F", "L", "G")


class AttentionError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    kind: str
    channels: int
    heads: int = 1
    window: WindowSpec = field(default_factory=WindowSpec)
    use_bias: bool = True
    # largest window grid (rows, cols) the G bias table must cover
    grid: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"heads={self.heads} must divide channels={self.channels}")
        if self.kind == "F" and self.use_bias:
            object.__setattr__(self, "use_bias", False)

    def bias_table_size(self) -> int:
        if not self.use_bias:
            return 0
        if self.kind == "L":
            q = self.window.q
            return (2 * q - 1) ** 2
        return (2 * self.grid[0] - 1) * (2 * self.grid[1] - 1)


# --- building blocks ------------------------------------------------------


def qkv_project(x, params: Mapping) -> tuple[Tensor, Tensor, Tensor]:
    """Three independent 3x3 convolutions, evaluated as one stacked conv."""
    x = G.as_tensor(x)
    w = G.concat([params[f"{n}.w"] for n in "qkv"], axis=0)
    b = G.concat([params[f"{n}.b"] for n in "qkv"], axis=0)
    return G.split(G.conv2d(x, w, b), 3, axis=1)


def split_heads(D, heads: int) -> Tensor:
    """(..., R, d) -> (..., heads, R, d/heads), contiguous column blocks."""
    D = G.as_tensor(D)
    *lead, R, d = D.shape
    if heads < 1 or d % heads:
        raise ShapeError(f"{heads} heads do not divide vector dimension {d}")
    t = G.reshape(D, (*lead, R, heads, d // heads))
    n = len(lead)
    return G.permute(t, (*range(n), n + 1, n, n + 2))


def merge_heads(Dh) -> Tensor:
    Dh = G.as_tensor(Dh)
    *lead, h, R, dh = Dh.shape
    n = len(lead)
    t = G.permute(Dh, (*range(n), n + 1, n, n + 2))
    return G.reshape(t, (*lead, R, h * dh))


def scaled_attention(dq, dk, dv, bias=None, scale: float | None = None) -> tuple[Tensor, Tensor]:
    """out = softmax(Dq Dk^T / scale + B) Dv, batched over leading axes."""
    dq, dk, dv = G.as_tensor(dq), G.as_tensor(dk), G.as_tensor(dv)
    if scale is None:
        scale = float(np.sqrt(dq.shape[-1]))
    if scale <= 0:
        raise ValueError("scale must be positive")
    if dq.shape[-1] != dk.shape[-1] or dk.shape[-2] != dv.shape[-2]:
        raise ShapeError(f"incompatible Q/K/V shapes {dq.shape}, {dk.shape}, {dv.shape}")
    # scaling Q rather than the logits keeps the extra pass linear in the row count
    logits = G.matmul(G.scale(dq, 1.0 / scale), G.transpose_last(dk))
    if bias is not None:
        logits = G.add(logits, bias)
    if not np.isfinite(logits.data.sum()):
        raise AttentionError("non-finite attention logits")
    A = G.softmax(logits)
    return G.matmul(A, dv), A


@functools.lru_cache(maxsize=64)
def _relative_index(rows: int, cols: int, max_rows: int, max_cols: int) -> np.ndarray:
    yy, xx = np.divmod(np.arange(rows * cols), cols)
    dy = yy[:, None] - yy[None, :] + max_rows - 1
    dx = xx[:, None] - xx[None, :] + max_cols - 1
    idx = dy * (2 * max_cols - 1) + dx
    idx.setflags(write=False)
    return idx


def relative_index(rows: int, cols: int, max_rows: int | None = None, max_cols: int | None = None) -> np.ndarray:
    """Table index of the 2D offset between every pair of cells on a rows x cols grid."""
    max_rows = rows if max_rows is None else max_rows
    max_cols = cols if max_cols is None else max_cols
    if rows > max_rows or cols > max_cols:
        raise ShapeError(f"grid {rows}x{cols} exceeds bias table grid {max_rows}x{max_cols}")
    return _relative_index(rows, cols, max_rows, max_cols)


def relative_position_bias(ws: WindowSpec, kind: str, table, grid: tuple[int, int] | None = None,
                           max_grid: tuple[int, int] | None = None) -> Tensor:
    """Materialise the bias matrix B[i, j] = table[offset(i, j)].

    ``table`` is 1D or (heads, n_offsets).  For L the grid is the q x q patch
    grid of a window; for G it is the window grid, which must be passed.
    """
    table = G.as_tensor(table)
    if kind == "L":
        rows = cols = ws.q
        max_grid = (rows, cols)
    elif kind == "G":
        if grid is None:
            raise ValueError("global bias needs the window grid")
        rows, cols = grid
        max_grid = max_grid or grid
    else:
        raise ValueError(f"no positional bias for kind {kind!r}")
    need = (2 * max_grid[0] - 1) * (2 * max_grid[1] - 1)
    if table.shape[-1] != need:
        raise ShapeError(f"bias table has {table.shape[-1]} entries, expected {need}")
    return G.take(table, relative_index(rows, cols, *max_grid))


# --- the three mechanisms -------------------------------------------------


def _spatial(x, cfg: AttentionConfig, params: Mapping, gather, scatter) -> Tensor:
    ws = cfg.window
    q, k, v = qkv_project(x, params)
    q, rec = G.pad_to_window(q, ws)
    k, _ = G.pad_to_window(k, ws)
    v, _ = G.pad_to_window(v, ws)
    shape = q.shape
    heads = cfg.heads
    Dq, Dk, Dv = (split_heads(gather(t, ws), heads) for t in (q, k, v))
    bias = None
    if cfg.use_bias:
        grid = ws.grid(*shape[3:])
        bias = relative_position_bias(ws, cfg.kind, params["bias"], grid=grid, max_grid=cfg.grid)
    d_head = Dq.shape[-1]
    out, _ = scaled_attention(Dq, Dk, Dv, bias, float(np.sqrt(d_head)))
    return G.crop(scatter(merge_heads(out), shape, ws), rec)


def local_attention(x, cfg: AttentionConfig, params: Mapping) -> Tensor:
    if cfg.kind != "L":
        raise ValueError("local_attention needs kind L")
    return _spatial(x, cfg, params, G.local_rows, G.local_unrows)


def global_attention(x, cfg: AttentionConfig, params: Mapping) -> Tensor:
    if cfg.kind != "G":
        raise ValueError("global_attention needs kind G")
    return _spatial(x, cfg, params, G.global_rows, G.global_unrows)


def frame_attention(x, cfg: AttentionConfig, params: Mapping) -> Tensor:
    if cfg.kind != "F":
        raise ValueError("frame_attention needs kind F")
    q, k, v = qkv_project(x, params)
    shape = q.shape
    Dq, Dk, Dv = (split_heads(G.frame_rows(t), cfg.heads) for t in (q, k, v))
    out, _ = scaled_attention(Dq, Dk, Dv, None, float(np.sqrt(Dq.shape[-1])))
    return G.frame_unrows(merge_heads(out), shape)


ATTENTION = {"L": local_attention, "G": global_attention, "F": frame_attention}


def attend(x, cfg: AttentionConfig, params: Mapping) -> Tensor:
    return ATTENTION[cfg.kind](x, cfg, params)


def attention_param_shapes(cfg: AttentionConfig) -> dict[str, tuple]:
    C = cfg.channels
    shapes = {}
    for n in "qkv":
        shapes[f"{n}.w"] = (C, C, 3, 3)
        shapes[f"{n}.b"] = (C,)
    if cfg.use_bias:
        shapes["bias"] = (cfg.heads, cfg.bias_table_size())
    return shapes


def dense_patch_attention(x: np.ndarray, p: int, dtype=np.float64, chunk: int = 1024) -> np.ndarray:
    """Single-head full attention over every patch of each frame.

    x holds already-projected features (Q = K = V = x).  This is the
    quadratic-cost reference for the decomposed mechanisms; query rows are
    processed in chunks so memory stays bounded while the work stays quadratic.
    """
    B, C, F, H, W = x.shape
    if H != W:
        raise ShapeError("dense oracle expects square frames")
    ws = WindowSpec(w=H, p=p)
    rows = local_rows(x.astype(dtype), ws)  # one window = the whole frame
    keys_t = np.swapaxes(rows, -1, -2)
    scale = 1.0 / np.sqrt(rows.shape[-1])
    out = np.empty_like(rows)
    for s in range(0, rows.shape[-2], chunk):
        logits = rows[..., s:s + chunk, :] @ keys_t * scale
        logits -= logits.max(axis=-1, keepdims=True)
        a = np.exp(logits)
        a /= a.sum(axis=-1, keepdims=True)
        out[..., s:s + chunk, :] = a @ rows
    return local_unrows(out, x.shape, ws).astype(x.dtype)
