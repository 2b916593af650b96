"""Strict ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .tracker import MODES, TrackerConfig


@dataclass
class RunConfig:
    seed: int = 0
    bins: int = 400
    embed_dim: int = 128
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    cond_tokens: int = 9
    context_z: float = 2.0
    context_x: float = 4.0
    lr: float = 3e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    steps: int = 1000
    mask_ratio: float = 0.5
    data_root: str = "data/train"
    out_dir: str = "runs/default"
    mode: str = "additive"

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {', '.join(MODES)}; got {self.mode!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must lie in (0, 1); got {self.mask_ratio}")
        for key in ("bins", "embed_dim", "heads", "enc_layers", "dec_layers", "cond_tokens", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be positive; got {getattr(self, key)}")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0; got {self.steps}")
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.bins < 2:
            raise ConfigurationError("bins must be >= 2")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be > 0 and weight_decay >= 0")

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(dim=self.embed_dim, heads=self.heads, enc_layers=self.enc_layers,
                             dec_layers=self.dec_layers, bins=self.bins, cond_tokens=self.cond_tokens,
                             context_z=self.context_z, context_x=self.context_x)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    def write(self, directory) -> Path:
        path = Path(directory) / "config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def parse_config(text: str, source: str = "<config>", **overrides) -> RunConfig:
    """Parse and validate; unknown keys, duplicates and bad values are fatal."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigurationError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigurationError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = _coerce(key, val, f"{source}:{lineno}")
    for key, val in overrides.items():
        if val is not None:
            values[key] = _coerce(key, str(val), "override")
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _coerce(key: str, val: str, where: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(val)
        if kind == "float":
            return float(val)
    except ValueError as exc:
        raise ConfigurationError(f"{where}: {key} expects {kind}, got {val!r}") from exc
    return val


def load_config(path, **overrides) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path), **overrides)
