"""Reverse-mode differentiation over the tensorcore op set.

A :class:`Tensor` wraps an ndarray.  Ops called while recording is enabled
attach a vector-Jacobian closure to their output; :func:`backward` walks the
recorded graph in reverse topological order and accumulates gradients.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

from . import tensorcore as tc

_RECORDING = True


@contextlib.contextmanager
def no_grad():
    global _RECORDING
    prev, _RECORDING = _RECORDING, False
    try:
        yield
    finally:
        _RECORDING = prev


class GradError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "parents", "vjp", "requires_grad", "grad", "op")

    def __init__(self, data, parents: tuple = (), vjp: Callable | None = None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, op="param")
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, vjp, op) -> Tensor:
    parents = tuple(parents)
    if _RECORDING and any(p.requires_grad for p in parents):
        return Tensor(data, parents, vjp, requires_grad=True, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise and linear algebra --------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c) if a.data.dtype.kind == "f" else c
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def transpose_last(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "permute")


def softmax(a) -> Tensor:
    """Row softmax over the last axis, max-subtracted."""
    a = as_tensor(a)
    s = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), vjp, "softmax")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype
    return _record(np.asarray(a.data.sum(dtype=np.float64), dtype=dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).astype(dtype),), "sum")


def concat(tensors: Iterable, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def split(a, n: int, axis: int = 1) -> tuple[Tensor, ...]:
    """Split into n equal parts along ``axis``."""
    a = as_tensor(a)
    parts = np.split(a.data, n, axis=axis)
    out = []
    for i, part in enumerate(parts):
        def vjp(g, i=i):
            full = np.zeros(a.shape, dtype=g.dtype)
            np.split(full, n, axis=axis)[i][...] = g
            return (full,)
        out.append(_record(part, (a,), vjp, "split"))
    return tuple(out)


def take(table, index: np.ndarray) -> Tensor:
    """Gather ``table[..., index]`` along the last axis; backward scatter-adds."""
    table = as_tensor(table)

    def vjp(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        lead = table.shape[:-1]
        g2 = g.reshape(lead + (-1,))
        flat = np.broadcast_to(index.reshape(-1), g2.shape)
        for k in np.ndindex(*lead) if lead else [()]:
            gt[k] += np.bincount(flat[k], weights=g2[k], minlength=table.shape[-1])
        return (gt,)

    return _record(table.data[..., index], (table,), vjp, "take")


# --- tensorcore ops -------------------------------------------------------


def conv2d(x, w, b=None) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    tc.check5d(x.data)
    if len(w.shape) != 4 or w.shape[1] != x.shape[1] or w.shape[2:] != (3, 3):
        raise tc.ShapeError(f"conv weight {w.shape} does not fit input with {x.shape[1]} channels")
    cols = tc._cols(x.data)
    Co = w.shape[0]
    B, _, F, H, W = x.shape
    out = w.data.reshape(Co, -1) @ cols
    if b is not None:
        out += parents[2].data.reshape(Co, 1)
    out = out.reshape(Co, B, F, H, W).transpose(1, 0, 2, 3, 4)

    def vjp(g):
        gx, gw, gb = tc.conv2d_backward(g, x.data, w.data, cols)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _record(out, parents, vjp, "conv2d")


def layer_norm(x, gain, offset, eps: float = tc.LN_EPS) -> Tensor:
    x, gain, offset = as_tensor(x), as_tensor(gain), as_tensor(offset)
    C = x.shape[1]
    xhat, inv = tc._ln_core(x.data, eps)
    gs = gain.data.reshape(1, C, 1, 1, 1)
    y = xhat * gs + offset.data.reshape(1, C, 1, 1, 1)

    def vjp(g):
        ggain = (g * xhat).sum(axis=(0, 2, 3, 4))
        goff = g.sum(axis=(0, 2, 3, 4))
        gx_hat = g * gs
        m = gx_hat.mean(axis=(1, 3, 4), keepdims=True)
        mx = (gx_hat * xhat).mean(axis=(1, 3, 4), keepdims=True)
        gx = inv * (gx_hat - m - xhat * mx)
        return gx, ggain, goff

    return _record(y, (x, gain, offset), vjp, "layer_norm")


def prelu(x, slope) -> Tensor:
    x, slope = as_tensor(x), as_tensor(slope)
    s = slope.data.reshape(1, -1, 1, 1, 1)
    pos = x.data >= 0

    def vjp(g):
        gx = np.where(pos, g, g * s)
        gs = np.where(pos, 0, g * x.data).sum(axis=(0, 2, 3, 4))
        return gx, gs.reshape(slope.shape)

    return _record(np.where(pos, x.data, s * x.data), (x, slope), vjp, "prelu")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: a fixed binary mask scaled by 1/(1-p)."""
    x = as_tensor(x)
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a seeded generator")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1 - p)
    return _record(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def _perm_op(name, fwd, inv):
    def op(x, *args) -> Tensor:
        x = as_tensor(x)
        return _record(fwd(x.data, *args), (x,), lambda g: (inv(g, x.shape, *args),), name)
    op.__name__ = name
    return op


local_rows = _perm_op("local_rows", tc.local_rows, lambda g, s, ws: tc.local_unrows(g, s, ws))
global_rows = _perm_op("global_rows", tc.global_rows, lambda g, s, ws: tc.global_unrows(g, s, ws))
frame_rows = _perm_op("frame_rows", tc.frame_rows, lambda g, s: tc.frame_unrows(g, s))
patch_merge = _perm_op("patch_merge", tc.patch_merge, lambda g, s: tc.patch_unmerge(g))


def local_unrows(rows, shape, ws) -> Tensor:
    rows = as_tensor(rows)
    return _record(tc.local_unrows(rows.data, shape, ws), (rows,),
                   lambda g: (tc.local_rows(g, ws),), "local_unrows")


def global_unrows(rows, shape, ws) -> Tensor:
    rows = as_tensor(rows)
    return _record(tc.global_unrows(rows.data, shape, ws), (rows,),
                   lambda g: (tc.global_rows(g, ws),), "global_unrows")


def frame_unrows(rows, shape) -> Tensor:
    rows = as_tensor(rows)
    return _record(tc.frame_unrows(rows.data, shape), (rows,),
                   lambda g: (tc.frame_rows(g),), "frame_unrows")


def upsample2x(x) -> Tensor:
    x = as_tensor(x)
    H, W = x.shape[3:]
    uh = tc.interp_matrix(H, x.data.dtype)
    uw = tc.interp_matrix(W, x.data.dtype)
    y = np.matmul(np.matmul(uh, x.data), uw.T)
    return _record(y, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),), "upsample2x")


def pad_to_window(x, ws: tc.WindowSpec):
    x = as_tensor(x)
    H, W = x.shape[3:]
    ph, pw = (-H) % ws.w, (-W) % ws.w
    rec = tc.PadRecord((0, ph), (0, pw))
    if ph == 0 and pw == 0:
        return x, rec
    ih, iw = tc.reflect_index(H, ph), tc.reflect_index(W, pw)

    def vjp(g):
        gh = np.zeros(g.shape[:3] + (H, g.shape[4]), dtype=g.dtype)
        np.add.at(gh, (slice(None),) * 3 + (ih,), g)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (slice(None),) * 4 + (iw,), gh)
        return (gx,)

    return _record(x.data.take(ih, axis=3).take(iw, axis=4), (x,), vjp, "pad"), rec


def crop(x, rec: tc.PadRecord) -> Tensor:
    x = as_tensor(x)
    if rec == tc.PadRecord((0, 0), (0, 0)):
        return x
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        tc.crop(gx, rec)[...] = g
        return (gx,)

    return _record(tc.crop(x.data, rec), (x,), vjp, "crop")


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise tc.ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data.astype(np.float64) - target.data
    n = diff.size
    dtype = pred.data.dtype

    def vjp(g):
        gp = (2.0 / n) * g * diff
        return gp.astype(dtype), (-gp).astype(dtype)

    return _record(np.asarray((diff * diff).mean(), dtype=dtype), (pred, target), vjp, "mse")


# --- driver ---------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Store d(loss)/d(leaf) in ``.grad`` of each reachable leaf and return a name -> gradient map.

    Gradients from earlier calls are overwritten, not accumulated.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise GradError("backward needs a scalar Tensor")
    if not loss.requires_grad:
        raise GradError("loss was not produced by recorded ops")
    grads = {id(loss): np.ones_like(loss.data)}
    out = {}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            node.grad = g
            if isinstance(node, Parameter):
                out[node.name] = node.grad
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return out


def finite_diff_check(fn: Callable[[], Tensor], params: list[Parameter], eps: float = 1e-4,
                      n_samples: int | None = None, rng: np.random.Generator | None = None,
                      analytic: dict[str, np.ndarray] | None = None, abs_floor: float = 1e-8,
                      rel_floor: float = 0.0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current parameter values.  When
    ``n_samples`` is given, that many coordinates are drawn at random across all
    parameters; otherwise every coordinate is checked.

    The error for one coordinate is |a - n| / max(|a|, |n|, floor), with floor
    the larger of ``abs_floor`` and ``rel_floor`` times the largest analytic
    gradient magnitude among the checked parameters.  A positive ``rel_floor``
    keeps entries that are zero by construction (a key bias under softmax shift
    invariance, say) from dividing roundoff by roundoff.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if analytic is None:
        for p in params:
            p.grad = None
        loss = fn()
        if loss.requires_grad:
            backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    else:
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique when analytic gradients are passed by name")
        grads = [np.asarray(analytic[n]) for n in names]

    scale = max(float(np.abs(g).max()) for g in grads)
    floor = max(rel_floor * scale, abs_floor)
    coords = [(k, i) for k, p in enumerate(params) for i in range(p.data.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in pick]

    worst = 0.0
    with no_grad():
        for k, i in coords:
            p = params[k]
            flat = p.data.reshape(-1)
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = float(grads[k].reshape(-1)[i])
            denom = max(abs(ana), abs(num), floor)
            worst = max(worst, abs(ana - num) / denom)
    return worst
