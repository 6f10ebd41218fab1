"""Run configuration: plain-text `section.key = value` files.

Unknown sections/keys and badly typed values are hard errors so a typo in a
run file cannot silently fall back to a default.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import FixerConfig

_WARP_MODES = ("geometry", "disparity", "flow")
_ANALYZE_METHODS = ("tsne", "pca")


@dataclass
class ModelSection:
    scales: int = 3
    channels: tuple = (32, 64, 128)
    latent_channels: int = 128
    max_offset: float = 4.0
    attn_blocks: int = 2


@dataclass
class TrainSection:
    lr: float = 2e-5
    batch: int = 1
    steps: int = 50000
    patch_h: int = 480
    patch_w: int = 832
    lambda_lpips: float = 1.0
    seed: int = 0


@dataclass
class WarpSection:
    mode: str = "geometry"
    temperature: float = 1.0


@dataclass
class AnalyzeSection:
    method: str = "tsne"
    perplexity: float = 30.0
    seed: int = 0
    samples: int = 250


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    warp: WarpSection = field(default_factory=WarpSection)
    analyze: AnalyzeSection = field(default_factory=AnalyzeSection)

    def validate(self):
        if len(self.model.channels) != self.model.scales:
            raise ConfigError(
                f"model.channels {self.model.channels} must list model.scales "
                f"({self.model.scales}) widths"
            )
        if self.warp.mode not in _WARP_MODES:
            raise ConfigError(f"warp.mode must be one of {_WARP_MODES}, got {self.warp.mode!r}")
        if self.warp.temperature <= 0:
            raise ConfigError(f"warp.temperature must be positive, got {self.warp.temperature}")
        if self.analyze.method not in _ANALYZE_METHODS:
            raise ConfigError(
                f"analyze.method must be one of {_ANALYZE_METHODS}, got {self.analyze.method!r}"
            )
        if self.analyze.perplexity <= 0:
            raise ConfigError(f"analyze.perplexity must be positive")
        if self.analyze.samples < 1:
            raise ConfigError(f"analyze.samples must be >= 1, got {self.analyze.samples}")
        if self.train.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.train.lr}")
        if self.train.batch < 1 or self.train.steps < 0:
            raise ConfigError("train.batch must be >= 1 and train.steps >= 0")
        if self.train.patch_h < 1 or self.train.patch_w < 1:
            raise ConfigError("train patch must be non-empty")
        if self.train.lambda_lpips < 0:
            raise ConfigError("train.lambda_lpips must be >= 0")
        for name in ("scales", "latent_channels", "attn_blocks"):
            if getattr(self.model, name) < (0 if name == "attn_blocks" else 1):
                raise ConfigError(f"model.{name} out of range")
        if any(c < 1 for c in self.model.channels):
            raise ConfigError(f"model.channels must be positive, got {self.model.channels}")
        if self.model.max_offset <= 0:
            raise ConfigError("model.max_offset must be positive")
        return self


def _parse_value(section: str, key: str, text: str, kind):
    text = text.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(v.strip()) for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r}: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    sections = {"model": cfg.model, "train": cfg.train, "warp": cfg.warp,
                "analyze": cfg.analyze}
    types = {
        name: {f.name: (tuple if f.name == "channels" else type(getattr(obj, f.name)))
               for f in fields(obj)}
        for name, obj in sections.items()
    }
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        lhs, rhs = line.split("=", 1)
        lhs = lhs.strip()
        if "." not in lhs:
            raise ConfigError(f"line {lineno}: key {lhs!r} must be section.key")
        section, key = lhs.split(".", 1)
        if section not in sections:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        if key not in types[section]:
            raise ConfigError(f"line {lineno}: unknown key {section}.{key}")
        setattr(sections[section], key, _parse_value(section, key, rhs, types[section][key]))
    cfg.validate()
    return cfg


def load_config(path=None) -> RunConfig:
    """Read a config file; None gives the defaults."""
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    return parse_config(path.read_text())


def derive_seed(base: int, label: str) -> int:
    """Stable named sub-seed so one CLI seed pins every random stream."""
    digest = hashlib.sha256(f"{label}:{base}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def fixer_config(cfg: RunConfig, seed: int) -> FixerConfig:
    m = cfg.model
    return FixerConfig(
        scales=m.scales,
        channels=m.channels,
        latent_channels=m.latent_channels,
        max_offset=m.max_offset,
        attn_blocks=m.attn_blocks,
        seed=seed,
    )
