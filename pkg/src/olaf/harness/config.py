"""Run configuration: nested dataclasses, YAML/JSON serialization and dotted overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..adapt import SCHEMES
from ..channelizer import MaskProvider
from ..model import ARCHS


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | raster
    path: str | None = None  # raster root holding train/ and val/
    n_train: int = 200
    n_val: int = 50
    size: int = 64
    seed: int = 0


@dataclass
class ModelConfig:
    arch: str = "minisegnet"
    ldf: bool = False
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])


@dataclass
class ChannelConfig:
    fg: bool = False
    edge: bool = False
    provider: str = "oracle"
    noise_level: float = 0.0
    edge_threshold: float = 0.0
    root: str | None = None
    resample_noise: bool = False  # fresh training-mask noise every epoch (validation noise stays fixed)

    @property
    def k(self) -> int:
        return int(self.fg) + int(self.edge)

    def mask_provider(self) -> MaskProvider:
        return MaskProvider(self.provider, self.noise_level, self.edge_threshold, self.root)


@dataclass
class AdaptConfig:
    scheme: str = "none"
    init_checkpoint: str | None = None
    n_warm: int = 0
    warmup_mode: str = "ramp"  # ramp | freeze-backbone
    adapter_width: int | None = None


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 1e-3
    batch_size: int = 4
    weight_decay: float = 0.0
    class_weights: list[float] | None = None


@dataclass
class RunConfig:
    name: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    channels: ChannelConfig = field(default_factory=ChannelConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 15
    seed: int = 0
    deterministic: bool = True
    abort_on_divergence: bool = False
    output_dir: str = "runs/run"

    @property
    def in_channels(self) -> int:
        return 3 + self.channels.k

    def validate(self) -> "RunConfig":
        if self.model.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.model.arch!r}")
        if self.data.source not in ("synthetic", "raster"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        if self.data.source == "raster" and not self.data.path:
            raise ConfigError("raster data source needs data.path")
        if self.adapt.scheme not in ("none", *SCHEMES):
            raise ConfigError(f"unknown adaptation scheme {self.adapt.scheme!r}")
        if self.adapt.warmup_mode not in ("ramp", "freeze-backbone"):
            raise ConfigError(f"unknown warm-up mode {self.adapt.warmup_mode!r}")
        if self.optim.name not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optim.name!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        try:
            self.channels.mask_provider()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d or {})

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            return cls.from_dict(yaml.safe_load(path.read_text()))
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e

    def checksum(self) -> str:
        """Hash of everything that affects results (the output directory and name excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("name")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"model.ldf": True})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            set_dotted(d, key, value)
        return RunConfig.from_dict(d)


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {d!r}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value) if sub is not None else _coerce(names[key], value)
    return cls(**kwargs)


_SCALARS = {"int": int, "float": float}


def _coerce(f: dataclasses.Field, value):
    """Cast scalars to the annotated type; YAML reads e.g. ``1e30`` as a string."""
    kind = _SCALARS.get(str(f.type).replace(" | None", ""))
    if kind is None or value is None or isinstance(value, bool):
        return value
    if isinstance(value, kind):
        return value
    try:
        cast = kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"field {f.name!r} expects {kind.__name__}, got {value!r}") from None
    if kind is int and isinstance(value, float) and cast != value:
        raise ConfigError(f"field {f.name!r} expects an integer, got {value!r}")
    return cast


_NESTED = {
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "channels"): ChannelConfig,
    (RunConfig, "adapt"): AdaptConfig,
    (RunConfig, "optim"): OptimConfig,
}


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            raise ConfigError(f"unknown config section {key!r}")
        cur = cur[p]
    if parts[-1] not in cur:
        raise ConfigError(f"unknown config field {key!r}")
    cur[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def config_diff(a: RunConfig, b: RunConfig) -> dict[str, tuple]:
    """Dotted keys whose values differ between two configs."""
    out = {}

    def walk(x, y, prefix):
        for k in x:
            key = f"{prefix}{k}"
            if isinstance(x[k], dict):
                walk(x[k], y[k], key + ".")
            elif x[k] != y[k]:
                out[key] = (x[k], y[k])

    walk(a.to_dict(), b.to_dict(), "")
    return out
