"""Model and training configuration, profiles and fingerprints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

# RAF-DB ordering of the seven basic expressions.
CLASS_NAMES: tuple[str, ...] = (
    "surprise",
    "fear",
    "disgust",
    "happy",
    "sad",
    "angry",
    "neutral",
)

CAPTION_TEMPLATE = "a photo of a person showing a {label} expression"


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    n_classes: int = 7
    class_names: tuple[str, ...] = CLASS_NAMES
    n_landmarks: int = 5
    # LA-CLIP
    embed_dim: int = 64
    clip_width: int = 32
    clip_depth: int = 4
    text_width: int = 32
    temperature_init: float = 0.07
    # prior networks
    epd_dim: int = 128
    pnet_s1_layers: int = 2
    pnet_s1_heads: int = 4
    pnet_s1_token_dim: int = 16
    pnet_s2_width: int = 32
    pnet_s2_blocks: int = 3
    # LLformer
    channels: tuple[int, ...] = (16, 32, 64)
    window_size: int = 4
    dlnet_heads: int = 2
    fusion_dim: int = 64
    fusion_heads: int = 4
    fusion_grid: int = 4
    ce_reduction: str = "sum"
    # diffusion
    T: int = 4
    variant: str = "paper"
    denoiser_layers: int = 4

    def __post_init__(self) -> None:
        if len(self.class_names) != self.n_classes:
            object.__setattr__(self, "class_names", tuple(CLASS_NAMES[: self.n_classes]))
        if self.n_classes < 2 or len(self.class_names) != self.n_classes:
            raise ConfigError(f"n_classes must be in [2, {len(CLASS_NAMES)}], got {self.n_classes}")
        unknown = [c for c in self.class_names if c not in CLASS_NAMES]
        if unknown:
            raise ConfigError(f"class_names outside the closed vocabulary: {unknown}")
        if not self.channels:
            raise ConfigError("channels must list at least one scale")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"channels must grow with depth, got {self.channels}")
        if self.image_size % (2 ** (len(self.channels) - 1)):
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{len(self.channels) - 1}"
            )
        if self.image_size < self.window_size:
            raise ConfigError(f"image_size {self.image_size} below window_size {self.window_size}")
        if self.ce_reduction not in ("sum", "mean"):
            raise ConfigError(f"ce_reduction must be 'sum' or 'mean', got {self.ce_reduction!r}")
        if self.variant not in ("paper", "ddpm_bar"):
            raise ConfigError(f"variant must be 'paper' or 'ddpm_bar', got {self.variant!r}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.pnet_s1_token_dim % self.pnet_s1_heads:
            raise ConfigError("pnet_s1_token_dim must be divisible by pnet_s1_heads")
        if self.fusion_dim % self.fusion_heads:
            raise ConfigError("fusion_dim must be divisible by fusion_heads")
        for c in self.channels:
            if c % self.dlnet_heads:
                raise ConfigError(f"channel width {c} not divisible by dlnet_heads")

    @property
    def n_scales(self) -> int:
        return len(self.channels)

    def scale_sizes(self) -> list[int]:
        return [self.image_size // 2**s for s in range(self.n_scales)]

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["class_names"] = list(self.class_names)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown model config key: {bad[0]}")
        if "class_names" in d:
            d["class_names"] = tuple(d["class_names"])
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def replace(self, **kw: Any) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


# Architecture fields that must agree between a stage-1 checkpoint and stage 2.
COMPAT_FIELDS = ("epd_dim", "embed_dim", "channels", "image_size", "n_classes", "n_landmarks")


def fingerprint(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 200
    batch_size: int = 64
    lr: float = 3.5e-4
    weight_decay: float = 1e-4
    seed: int = 0
    max_steps: Optional[int] = None
    lr_schedule: str = "constant"
    # stage-2 / ablation toggles
    T: int = 4
    variant: str = "paper"
    use_diffusion: bool = True
    loss: str = "total"
    insert_noise: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.loss not in ("ce", "total"):
            raise ConfigError(f"loss must be 'ce' or 'total', got {self.loss!r}")
        if self.variant not in ("paper", "ddpm_bar"):
            raise ConfigError(f"variant must be 'paper' or 'ddpm_bar', got {self.variant!r}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        bad = sorted(set(d) - known)
        if bad:
            raise ConfigError(f"unknown train config key: {bad[0]}")
        if "model" in d and isinstance(d["model"], dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    def replace(self, **kw: Any) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


DESK_MODEL = ModelConfig(
    embed_dim=32,
    clip_width=16,
    text_width=16,
    epd_dim=32,
    pnet_s1_token_dim=8,
    pnet_s2_width=16,
    channels=(8, 16, 32),
    fusion_dim=32,
    ce_reduction="mean",
)

PAPER_MODEL = ModelConfig(image_size=112, channels=(48, 96, 192), fusion_dim=192, fusion_heads=8)


def desk_profile(n_classes: int = 7, **kw: Any) -> TrainConfig:
    """Small-scale profile used by the tests: 32x32 inputs, C = D_e = 32."""
    model = DESK_MODEL.replace(n_classes=n_classes, class_names=CLASS_NAMES[:n_classes])
    base: dict[str, Any] = dict(epochs=75, batch_size=16, lr=1e-3, model=model)
    base.update(kw)
    return TrainConfig(**base)


def paper_profile(n_classes: int = 7, **kw: Any) -> TrainConfig:
    model = PAPER_MODEL.replace(n_classes=n_classes, class_names=CLASS_NAMES[:n_classes])
    base: dict[str, Any] = dict(epochs=200, batch_size=64, lr=3.5e-4, weight_decay=1e-4, model=model)
    base.update(kw)
    return TrainConfig(**base)


PROFILES = {"desk": desk_profile, "paper": paper_profile}
