"""Training configuration, JSON round trip and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .augmentation import AugmentationConfig, ConfigError
from .losses import LossConfig
from .networks import NetConfig
from .roi import RoiMode
from .synth import SynthSpec

SECTIONS = {
    "aug": AugmentationConfig,
    "loss": LossConfig,
    "roi": RoiMode,
    "net": NetConfig,
    "synth": SynthSpec,
}

ALIASES = {
    "lambda": "loss.lam",
    "views": "aug.V",
    "n": "aug.jitter_n",
}


@dataclass
class TrainConfig:
    epochs: float = 20.0
    epoch_size: int = 160
    batch_size: int = 16
    base_lr: float = 1.6
    warmup_epochs: float = 1.0
    ema_momentum: float = 0.97
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lars_eta: float = 0.001
    seed: int = 0
    eval_seed: int = 1
    eval_images: int = 128
    ckpt_every: int = 100
    log_wall_ms: bool = False
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    roi: RoiMode = field(default_factory=RoiMode)
    net: NetConfig = field(default_factory=NetConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    @property
    def total_steps(self) -> int:
        return max(1, math.ceil(self.epochs * self.epoch_size / self.batch_size))

    @property
    def warmup_steps(self) -> int:
        return min(self.total_steps - 1, round(self.warmup_epochs * self.epoch_size / self.batch_size))

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    def validate(self) -> "TrainConfig":
        if not self.base_lr > 0:
            raise ConfigError("base_lr", f"must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be at least 1, got {self.batch_size}")
        if not 0 <= self.ema_momentum <= 1:
            raise ConfigError("ema_momentum", f"must lie in [0, 1], got {self.ema_momentum}")
        if self.optimizer not in ("sgd", "lars"):
            raise ConfigError("optimizer", f"must be 'sgd' or 'lars', got {self.optimizer!r}")
        if not self.epochs > 0 or self.epoch_size < 1:
            raise ConfigError("epochs", f"need epochs > 0 and epoch_size >= 1, got {self.epochs}, {self.epoch_size}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs", f"must be non-negative, got {self.warmup_epochs}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", f"must be non-negative, got {self.weight_decay}")
        if self.eval_images < 1:
            raise ConfigError("eval_images", f"must be at least 1, got {self.eval_images}")
        self.aug.validate()
        self.loss.validate()
        self.synth.validate()
        if self.synth.canvas_size < self.aug.view_size:
            raise ConfigError("canvas_size", f"must be >= view_size {self.aug.view_size}, got {self.synth.canvas_size}")
        if self.roi.kind == "shared_grid" and self.aug.local_views:
            raise ConfigError("roi", "shared_grid mode compares whole views and cannot use local views")
        if self.aug.view_size % self.net.total_stride:
            raise ConfigError("view_size", f"must be divisible by the backbone stride {self.net.total_stride}")
        if self.aug.local_views and self.aug.local_view_size % self.net.total_stride:
            raise ConfigError("local_view_size", f"must be divisible by the backbone stride {self.net.total_stride}")
        return self


# ---------------------------------------------------------------- serialization


def to_dict(cfg: TrainConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(dataclasses.asdict(cfg))


def _build(cls, data: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}{unknown[0]}", "unknown field")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name not in SECTIONS else None
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    sections = {}
    for name, cls in SECTIONS.items():
        sub = data.pop(name, {})
        if isinstance(sub, str) and name == "roi":
            sections[name] = RoiMode.parse(sub)
            continue
        try:
            sections[name] = _build(cls, sub, f"{name}.")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(name, str(exc)) from exc
    top = _build(TrainConfig, data, "")
    for name, value in sections.items():
        setattr(top, name, value)
    return top


def load_config(path) -> TrainConfig:
    text = Path(path).read_text()
    try:
        return from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc


def dump_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------- overrides


def _leaf_index() -> dict:
    index: dict = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name not in SECTIONS:
            index.setdefault(f.name, []).append(f.name)
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            index.setdefault(f.name, []).append(f"{section}.{f.name}")
    return index


def resolve_key(key: str) -> str:
    if key in ALIASES:
        return ALIASES[key]
    if key == "roi" or "." in key:
        return key
    if key in {f.name for f in dataclasses.fields(TrainConfig)}:
        return key  # top-level fields shadow same-named section fields (seed vs synth.seed)
    paths = _leaf_index().get(key)
    if not paths:
        raise ConfigError(key, "unknown configuration key")
    if len(paths) > 1:
        raise ConfigError(key, f"ambiguous key; use one of {paths}")
    return paths[0]


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """Apply ``{key: value}`` or ``["key=value", ...]`` to a copy of ``cfg``."""
    if not isinstance(overrides, dict):
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(item, "override must look like key=value")
            k, v = item.split("=", 1)
            pairs[k.strip()] = parse_value(v.strip())
        overrides = pairs
    data = to_dict(cfg)
    for key, value in overrides.items():
        path = resolve_key(key)
        if path == "roi":
            data["roi"] = value if isinstance(value, dict) else to_dict_roi(value)
            continue
        node = data
        parts = path.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(key, "unknown configuration key")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(key, "unknown configuration key")
        node[parts[-1]] = value
    return from_dict(data)


def to_dict_roi(text) -> dict:
    mode = RoiMode.parse(str(text))
    return {"kind": mode.kind, "c": mode.c}
