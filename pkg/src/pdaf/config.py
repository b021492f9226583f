"""Run configuration: one flat, JSON-serializable schema shared by every command.

Unknown keys are rejected, both in files and in ``key=value`` overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError


@dataclass
class AugmentRanges:
    """Sampling ranges for photometric augmentation.

    All entries are ``[lo, hi]``. Brightness, contrast, saturation and gamma are
    multipliers (lo must be > 0); noise is the Gaussian sigma in intensity units.
    """

    brightness: tuple[float, float] = (0.7, 1.3)
    contrast: tuple[float, float] = (0.7, 1.3)
    saturation: tuple[float, float] = (0.5, 1.5)
    gamma: tuple[float, float] = (0.8, 1.25)
    noise: tuple[float, float] = (0.0, 0.02)

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            lo, hi = getattr(self, f.name)
            if lo > hi:
                raise ConfigError(f"augment range {f.name}: lo {lo} > hi {hi}")
            if f.name == "noise":
                if lo < 0:
                    raise ConfigError(f"augment range noise: sigma must be >= 0, got {lo}")
            elif lo <= 0:
                raise ConfigError(f"augment range {f.name}: lo must be > 0, got {lo}")

    @classmethod
    def identity(cls) -> "AugmentRanges":
        return cls((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0))


def shift_ranges() -> AugmentRanges:
    """Held-out regime used to build the shifted test split."""
    return AugmentRanges(
        brightness=(0.4, 1.8),
        contrast=(0.4, 1.8),
        saturation=(0.2, 2.0),
        gamma=(0.5, 2.0),
        noise=(0.02, 0.08),
    )


@dataclass
class Config:
    seed: int = 0

    # data
    image_size: int = 64
    num_classes: int = 5
    n_shapes_min: int = 2
    n_shapes_max: int = 5
    train_size: int = 200
    val_size: int = 40
    test_size: int = 40
    train_seed_offset: int = 0
    val_seed_offset: int = 1_000_000
    test_seed_offset: int = 2_000_000
    train_augment: AugmentRanges = field(default_factory=AugmentRanges)
    shift_augment: AugmentRanges = field(default_factory=shift_ranges)

    # model
    feature_channels: int = 32
    ldp_channels: int = 4
    timesteps: int = 4
    beta_start: float = 0.1
    beta_end: float = 0.99
    time_embed_dim: int = 8
    dpe_width: int = 32

    # baseline pretraining
    pretrain_epochs: int = 30
    pretrain_lr: float = 2e-3
    pretrain_batch_size: int = 4
    pretrain_patience: int = 5

    # PDAF fine-tuning
    epochs: int = 40
    lr: float = 1e-4
    batch_size: int = 4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_task: float = 0.5
    lambda_sc: float = 0.5
    lambda_prior: float = 1.0
    kl_weight: float = 0.0
    task_branches: str = "both"
    class_weight_min: float = 0.2
    class_weight_max: float = 5.0

    def validate(self) -> "Config":
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.num_classes >= 2, f"num_classes must be >= 2, got {self.num_classes}")
        need(self.num_classes <= 256, "num_classes must fit in one byte")
        need(self.image_size >= 16 and self.image_size % 8 == 0,
             f"image_size must be >= 16 and divisible by 8, got {self.image_size}")
        need(0 <= self.n_shapes_min <= self.n_shapes_max, "need 0 <= n_shapes_min <= n_shapes_max")
        for name in ("train_size", "val_size", "test_size"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        ranges = sorted([
            (self.train_seed_offset, self.train_size, "train"),
            (self.val_seed_offset, self.val_size, "val"),
            (self.test_seed_offset, self.test_size, "test"),
        ])
        for (a0, an, aname), (b0, _, bname) in zip(ranges, ranges[1:]):
            need(a0 + an <= b0, f"seed ranges of {aname} and {bname} splits overlap")
        self.train_augment.validate()
        self.shift_augment.validate()
        need(self.feature_channels >= 1 and self.ldp_channels >= 1, "channel counts must be >= 1")
        need(self.timesteps >= 1, f"timesteps must be >= 1, got {self.timesteps}")
        need(0 < self.beta_start <= self.beta_end < 1,
             f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        need(self.time_embed_dim >= 2 and self.time_embed_dim % 2 == 0, "time_embed_dim must be even")
        need(self.dpe_width >= 1, "dpe_width must be >= 1")
        for name in ("pretrain_epochs", "epochs", "pretrain_patience"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        for name in ("pretrain_batch_size", "batch_size"):
            need(getattr(self, name) >= 1, f"{name} must be >= 1")
        for name in ("pretrain_lr", "lr", "adam_eps", "lambda_task", "lambda_sc", "lambda_prior",
                     "kl_weight"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        need(0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1, "adam betas must be in [0, 1)")
        need(self.task_branches in ("both", "posterior", "diffusion"),
             f"task_branches must be both|posterior|diffusion, got {self.task_branches!r}")
        need(0 < self.class_weight_min <= self.class_weight_max, "bad class weight clip range")
        return self

    # serialization

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        for key in ("train_augment", "shift_augment"):
            out[key] = {k: list(v) for k, v in out[key].items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "Config":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in ("train_augment", "shift_augment"):
                kwargs[key] = _augment_from(value, key)
            else:
                kwargs[key] = _coerce(key, value, getattr(cls(), key))
        return cls(**kwargs).validate()

    @classmethod
    def from_json_file(cls, path) -> "Config":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def with_overrides(self, overrides: list[str]) -> "Config":
        """Apply ``key=value`` / ``section.key=value`` strings; values parse as JSON."""
        raw = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, text = item.split("=", 1)
            try:
                value = json.loads(text)
            except json.JSONDecodeError:
                value = text
            parts = key.split(".")
            target = raw
            for part in parts[:-1]:
                if not isinstance(target.get(part), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                target = target[part]
            if parts[-1] not in target:
                raise ConfigError(f"unknown config key {key!r}")
            target[parts[-1]] = value
        return Config.from_dict(raw)


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"config key {key!r}: unexpected boolean")
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} expects a string, got {value!r}")
        return value
    raise ConfigError(f"config key {key!r}: unsupported value {value!r}")


def _augment_from(value: Any, key: str) -> AugmentRanges:
    if isinstance(value, AugmentRanges):
        return value
    if not isinstance(value, dict):
        raise ConfigError(f"{key} must be an object")
    names = {f.name for f in dataclasses.fields(AugmentRanges)}
    fields: dict[str, tuple[float, float]] = {}
    for name, pair in value.items():
        if name not in names:
            raise ConfigError(f"unknown config key '{key}.{name}'")
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in pair)):
            raise ConfigError(f"{key}.{name} must be a [lo, hi] pair of numbers")
        fields[name] = (float(pair[0]), float(pair[1]))
    base = shift_ranges() if key == "shift_augment" else AugmentRanges()
    return dataclasses.replace(base, **fields)
