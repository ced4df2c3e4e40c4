"""Cells, blocks and the two-resolution HRNet backbone."""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import grad as G
from .attention import KINDS, AttentionConfig, attend, attention_param_shapes
from .grad import Parameter, Tensor
from .tensorcore import DTYPE, ShapeError, WindowSpec

PARAM_MAGIC = "ITXP"
PARAM_VERSION = 1


class ConfigError(ValueError):
    pass


class ParamLoadError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    spec: str = "FLG"

    def __post_init__(self):
        if not self.spec or any(ch not in KINDS for ch in self.spec):
            raise ConfigError(f"block spec {self.spec!r} must be a non-empty string over F, L, G")

    def __iter__(self):
        return iter(self.spec)

    def __len__(self):
        return len(self.spec)


@dataclass(frozen=True)
class CellConfig:
    kind: str
    attention: AttentionConfig
    dropout: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigError("dropout must lie in [0, 1]")


@dataclass
class ModelConfig:
    C: int = 16
    C_in: int = 3
    C_out: int = 2
    block_spec: str = "FLG"
    window: int = 8
    patch: int = 2
    heads: int = 2
    dropout: float = 0.1
    use_bias: bool = True
    # frame size the global-attention bias tables are sized for
    image_size: tuple[int, int] = (32, 32)

    def __post_init__(self):
        BlockSpec(self.block_spec)
        self.image_size = tuple(self.image_size)
        if self.C < 1 or self.C % self.heads:
            raise ConfigError(f"heads={self.heads} must divide C={self.C}")
        try:
            WindowSpec(self.window, self.patch)
        except ShapeError as exc:
            raise ConfigError(str(exc)) from exc
        H, W = self.image_size
        if H % 2 or W % 2:
            raise ConfigError(f"image size {H}x{W} must be even for the half-resolution branch")
        if min(H, W) // 2 < self.window:
            raise ConfigError(f"half-resolution frame {H // 2}x{W // 2} is smaller than window {self.window}")

    @property
    def ws(self) -> WindowSpec:
        return WindowSpec(self.window, self.patch)

    def grid(self, level: int) -> tuple[int, int]:
        H, W = (s // 2 ** level for s in self.image_size)
        return math.ceil(H / self.window), math.ceil(W / self.window)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


# --- parameters -----------------------------------------------------------


class ParamStore(Mapping):
    """Ordered, uniquely named collection of learnable arrays."""

    def __init__(self):
        self._p: OrderedDict[str, Parameter] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._p:
            raise KeyError(f"duplicate parameter {name}")
        p = Parameter(np.ascontiguousarray(value), name)
        self._p[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._p[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._p)

    def __len__(self) -> int:
        return len(self._p)

    def scope(self, prefix: str) -> "Scope":
        return Scope(self, prefix)

    def count(self, prefix: str = "") -> int:
        return sum(p.data.size for n, p in self._p.items() if n.startswith(prefix))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._p.items()}

    def assign(self, arrays: Mapping[str, np.ndarray]) -> None:
        for n, p in self._p.items():
            if arrays[n].shape != p.data.shape:
                raise ParamLoadError(f"{n}: shape {arrays[n].shape} != {p.data.shape}")
        for n, p in self._p.items():
            p.data = np.array(arrays[n], dtype=p.data.dtype)

    def astype(self, dtype) -> None:
        for p in self._p.values():
            p.data = p.data.astype(dtype)


class Scope(Mapping):
    def __init__(self, store: ParamStore, prefix: str):
        self.store, self.prefix = store, prefix

    def __getitem__(self, name):
        return self.store[f"{self.prefix}.{name}"]

    def __iter__(self):
        n = len(self.prefix) + 1
        return (k[n:] for k in self.store if k.startswith(self.prefix + "."))

    def __len__(self):
        return sum(1 for _ in self)

    def scope(self, name: str) -> "Scope":
        return Scope(self.store, f"{self.prefix}.{name}")


def save_param_file(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    header = {
        "magic": PARAM_MAGIC,
        "version": PARAM_VERSION,
        "entries": [[n, list(a.shape)] for n, a in arrays.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_param_file(path) -> tuple[OrderedDict, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise ParamLoadError(f"{path}: unreadable parameter header") from exc
    if not isinstance(header, dict) or header.get("magic") != PARAM_MAGIC:
        raise ParamLoadError(f"{path}: bad magic, not an .itxp parameter file")
    payload = np.frombuffer(raw[nl + 1:], dtype="<f4")
    out, pos = OrderedDict(), 0
    for name, dims in header["entries"]:
        n = int(np.prod(dims))
        if pos + n > payload.size:
            raise ParamLoadError(f"{path}: truncated payload at {name}")
        out[name] = payload[pos:pos + n].reshape(dims).astype(DTYPE)
        pos += n
    if pos != payload.size:
        raise ParamLoadError(f"{path}: {payload.size - pos} trailing values")
    return out, header.get("meta", {})


# --- initialisation -------------------------------------------------------


def _conv_init(rng, co, ci):
    bound = 1.0 / math.sqrt(ci * 9)
    return rng.uniform(-bound, bound, size=(co, ci, 3, 3)).astype(DTYPE)


def _add_conv(store, rng, name, co, ci):
    store.add(f"{name}.w", _conv_init(rng, co, ci))
    store.add(f"{name}.b", np.zeros(co, DTYPE))


def _cell_configs(cfg: ModelConfig, C: int, level: int) -> list[CellConfig]:
    cells = []
    for kind in cfg.block_spec:
        att = AttentionConfig(kind=kind, channels=C, heads=cfg.heads, window=cfg.ws,
                              use_bias=cfg.use_bias and kind != "F", grid=cfg.grid(level))
        cells.append(CellConfig(kind, att, cfg.dropout))
    return cells


def _add_cell(store, rng, prefix, cell: CellConfig):
    C = cell.attention.channels
    for ln in ("ln1", "ln2"):
        store.add(f"{prefix}.{ln}.g", np.ones(C, DTYPE))
        store.add(f"{prefix}.{ln}.b", np.zeros(C, DTYPE))
    for name, shape in attention_param_shapes(cell.attention).items():
        if name == "bias":
            store.add(f"{prefix}.attn.bias", np.zeros(shape, DTYPE))
        elif name.endswith(".w"):
            store.add(f"{prefix}.attn.{name}", _conv_init(rng, C, C))
        else:
            store.add(f"{prefix}.attn.{name}", np.zeros(shape, DTYPE))
    _add_conv(store, rng, f"{prefix}.mix1", 4 * C, C)
    store.add(f"{prefix}.act.slope", np.full(4 * C, 0.25, DTYPE))
    _add_conv(store, rng, f"{prefix}.mix2", C, 4 * C)


# --- forward --------------------------------------------------------------


def cell_forward(x, cell: CellConfig, params: Mapping, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """x + attn(LN(x)), then + mixer(LN(.)); dropout on the cell output."""
    x = G.as_tensor(x)
    if x.shape[1] != cell.attention.channels:
        raise ShapeError(f"cell expects {cell.attention.channels} channels, got {x.shape[1]}")
    h = G.layer_norm(x, params["ln1.g"], params["ln1.b"])
    y = G.add(x, attend(h, cell.attention, params.scope("attn")))
    h = G.layer_norm(y, params["ln2.g"], params["ln2.b"])
    h = G.conv2d(h, params["mix1.w"], params["mix1.b"])
    h = G.prelu(h, params["act.slope"])
    h = G.conv2d(h, params["mix2.w"], params["mix2.b"])
    z = G.add(y, h)
    return G.dropout(z, cell.dropout, rng, training)


def block_forward(x, cells: list[CellConfig], params: Mapping, training: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    for i, cell in enumerate(cells):
        x = cell_forward(x, cell, params.scope(f"cell{i}"), training, rng)
    return x


class Model:
    """IT denoiser: pre-conv, five blocks on two resolution levels, post-conv.

    Block1 runs at full resolution and feeds two branches: Block2-Block3 at full
    resolution with C channels, and patch-merge down (C -> 2C), Block4-Block5 at
    half resolution, linear upsample (2C -> C).  The branches are concatenated
    and the post-conv maps 2C -> C_out.
    """

    blocks_full = ("block1", "block2", "block3")
    blocks_half = ("block4", "block5")

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamStore()
        self.cells_full = _cell_configs(cfg, cfg.C, 0)
        self.cells_half = _cell_configs(cfg, 2 * cfg.C, 1)
        rng = np.random.default_rng(seed)
        C = cfg.C
        _add_conv(self.params, rng, "pre", C, cfg.C_in)
        for b in self.blocks_full:
            self._add_block(rng, b, self.cells_full)
        _add_conv(self.params, rng, "down", 2 * C, 4 * C)
        for b in self.blocks_half:
            self._add_block(rng, b, self.cells_half)
        _add_conv(self.params, rng, "up", C, 2 * C)
        _add_conv(self.params, rng, "post", cfg.C_out, 2 * C)

    def _add_block(self, rng, name, cells):
        for i, cell in enumerate(cells):
            _add_cell(self.params, rng, f"{name}.cell{i}", cell)

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        x = G.as_tensor(x)
        if x.data.ndim != 5 or x.shape[1] != self.cfg.C_in:
            raise ShapeError(f"model expects [B, {self.cfg.C_in}, F, H, W], got {x.shape}")
        if x.shape[3] % 2 or x.shape[4] % 2:
            raise ShapeError(f"H and W must be even, got {x.shape[3:]}")
        p = self.params
        h = G.conv2d(x, p["pre.w"], p["pre.b"])
        h = block_forward(h, self.cells_full, p.scope("block1"), training, rng)
        a = block_forward(h, self.cells_full, p.scope("block2"), training, rng)
        a = block_forward(a, self.cells_full, p.scope("block3"), training, rng)
        d = G.conv2d(G.patch_merge(h), p["down.w"], p["down.b"])
        d = block_forward(d, self.cells_half, p.scope("block4"), training, rng)
        d = block_forward(d, self.cells_half, p.scope("block5"), training, rng)
        u = G.conv2d(G.upsample2x(d), p["up.w"], p["up.b"])
        return G.conv2d(G.concat([a, u], axis=1), p["post.w"], p["post.b"])

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        with G.no_grad():
            return self.forward(x, training=False).data


def build_hrnet(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def model_forward(m: Model, x, training: bool = False, rng=None) -> Tensor:
    return m.forward(x, training, rng)


def count_params(m: Model | ParamStore, prefix: str = "") -> int:
    store = m.params if isinstance(m, Model) else m
    return store.count(prefix)


def save_params(m: Model, path, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("model", m.cfg.to_dict())
    save_param_file(path, m.params.arrays(), meta)


def load_params(m: Model, path) -> dict:
    arrays, meta = load_param_file(path)
    missing = [n for n in m.params if n not in arrays]
    extra = [n for n in arrays if n not in m.params]
    if missing or extra:
        raise ParamLoadError(f"{path}: parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    m.params.assign(arrays)
    return meta
