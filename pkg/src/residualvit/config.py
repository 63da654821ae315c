"""Strict JSON run configuration."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, get_args, get_origin, get_type_hints

from .distill import TrainConfig
from .grounding import GroundingConfig
from .reduction import ReductionConfig
from .residual import InterleaveConfig
from .teacher import EncoderConfig


class ConfigError(ValueError):
    pass


@dataclass
class EncoderSection:
    H: int = 32
    W: int = 32
    C: int = 3
    P: int = 8
    L: int = 4
    d: int = 64
    n_heads: int = 4
    b: int = 64
    vocab: int = 256
    seed: int = 0


@dataclass
class ReductionSection:
    mode: str = "drop"
    p: float = 0.85
    strategy: str = "center"
    r: int = 0
    target_resolution: list | None = None
    rng_seed: int = 0


@dataclass
class InterleaveSection:
    N: int = 2
    use_residual: bool = True
    motion_window: int = 11


@dataclass
class TrainSection:
    n_train: int = 3
    batch_size: int = 16
    epochs: int = 5
    lr: float = 0.01
    optimizer: str = "adam"
    tau: float = 1.0
    loss: str = "ce"
    sampling: str = "all"
    plain_mse: bool = False
    seed: int = 0


@dataclass
class GroundingSection:
    window: int = 15
    mode: str = "scaled-mean"
    alpha: float = 1.0
    beta: float = 0.7
    fps: float = 1.0


@dataclass
class DataSection:
    n_videos: int = 64
    frames_per_video: int = 8
    eval_videos: int = 32
    clips_per_video: int = 4
    align_text: bool = True


@dataclass
class PathSection:
    out: str = "runs/default"
    corpus: str | None = None
    weights: str | None = None
    tokenizer: str | None = None
    features: str | None = None
    queries: str | None = None
    results: str | None = None
    motion: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    encoder: EncoderSection = field(default_factory=EncoderSection)
    reduction: ReductionSection = field(default_factory=ReductionSection)
    interleave: InterleaveSection = field(default_factory=InterleaveSection)
    train: TrainSection = field(default_factory=TrainSection)
    grounding: GroundingSection = field(default_factory=GroundingSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathSection = field(default_factory=PathSection)

    # typed views

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**dataclasses.asdict(self.encoder))

    def reduction_config(self) -> ReductionConfig:
        r = dataclasses.asdict(self.reduction)
        if r["target_resolution"] is not None:
            r["target_resolution"] = tuple(r["target_resolution"])
        return ReductionConfig(**r)

    def interleave_config(self) -> InterleaveConfig:
        i = self.interleave
        return InterleaveConfig(i.N, self.reduction_config(), i.use_residual, i.motion_window)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self.train))

    def grounding_config(self) -> GroundingConfig:
        g = dataclasses.asdict(self.grounding)
        g.pop("fps")
        return GroundingConfig(**g)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> "RunConfig":
        """Build every typed view once so semantic errors surface early."""
        for name, build in (("encoder", self.encoder_config), ("reduction", self.reduction_config),
                            ("interleave", self.interleave_config), ("train", self.train_config),
                            ("grounding", self.grounding_config)):
            try:
                build()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        return self


def _check_type(key: str, value: Any, hint) -> Any:
    args = get_args(hint)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    base = get_origin(base) or base
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    if base is bool:
        ok = isinstance(value, bool)
    elif base in (int, float):
        ok = isinstance(value, (int, float) if base is float else int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, base)
    if not ok:
        raise ConfigError(f"{key}: expected {base.__name__}, got {value!r}")
    return float(value) if base is float else value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {prefix + key!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        hint = hints[f.name]
        key = prefix + f.name
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, data[f.name], key + ".")
        else:
            kwargs[f.name] = _check_type(key, data[f.name], hint)
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    return from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Return a new config with dotted keys (``train.lr``) replaced."""
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return from_dict(data)
