"""JSON run configuration with strict key checking.

A run config holds one section per component dataclass.  Every section must be
present; fields inside a section fall back to the dataclass defaults.  Unknown
keys anywhere are rejected so that a typo cannot silently change a run.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .model import ConfigError, ModelConfig
from .mrsim import DEFAULT_TARGETS, PhantomSpec
from .train import TrainConfig


@dataclass
class DataConfig:
    """Synthetic training set: randomised phantoms corrupted inside an SNR band."""
    n_pairs: int = 200
    snr_range: tuple[float, float] = (0.5, 2.0)
    R_range: tuple[float, float] = (2.0, 5.0)
    seed: int = 1

    def __post_init__(self):
        self.snr_range = tuple(self.snr_range)
        self.R_range = tuple(self.R_range)
        if self.n_pairs < 2:
            raise ConfigError("n_pairs must be at least 2")
        if not 0 < self.snr_range[0] <= self.snr_range[1]:
            raise ConfigError("snr_range must be an increasing positive pair")
        if not 1 <= self.R_range[0] <= self.R_range[1]:
            raise ConfigError("R_range must be an increasing pair >= 1")


@dataclass
class LadderConfig:
    targets: tuple[float, ...] = DEFAULT_TARGETS
    R: float = 4.0
    seed: int = 123

    def __post_init__(self):
        self.targets = tuple(float(t) for t in self.targets)


@dataclass
class BenchConfig:
    sizes: tuple[int, ...] = (32, 64, 128, 256)
    window: int = 8
    patch: int = 2
    channels: int = 16
    frames: int = 1
    repeats: int = 3
    dense: bool = True

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2:
            raise ConfigError("bench needs at least two sizes to fit an exponent")


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "phantom": PhantomSpec,
    "ladder": LadderConfig,
    "bench": BenchConfig,
}
TOP_LEVEL = {"seed", "out", "checkpoint"}
PATH_KEYS = {"checkpoint"}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    ladder: LadderConfig = field(default_factory=LadderConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    out: str = "runs/desk"
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        d = {}
        for name in SECTIONS:
            d[name] = _plain(dataclasses.asdict(getattr(self, name)))
        d.update(seed=self.seed, out=self.out, checkpoint=self.checkpoint)
        return d


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key '{unknown[0]}'")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(raw) - set(SECTIONS) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    for name in SECTIONS:
        if name not in raw:
            raise ConfigError(f"missing field '{name}'")
    sections = {name: _build(cls, raw[name], name) for name, cls in SECTIONS.items()}
    cfg = RunConfig(**sections, seed=int(raw.get("seed", 0)), out=str(raw.get("out", "runs/desk")),
                    checkpoint=raw.get("checkpoint"))
    for key in PATH_KEYS:
        value = getattr(cfg, key)
        if value is not None:
            path = Path(value)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            if not path.exists():
                raise ConfigError(f"{key}: path '{value}' does not exist")
            setattr(cfg, key, str(path))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file '{path}' not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return parse_config(raw, path.parent)


def default_config_dict() -> dict:
    return RunConfig().to_dict()
