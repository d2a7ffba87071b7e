"""Run configuration: model sizes, noise, loss weights and ablation switches."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from .errors import ConfigError

LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1e0, 1e1)
LR_SCHEDULES = ("constant", "cosine")
NOISE_KINDS = ("rotation", "crop", "gaussian", "radiation")


@dataclass
class NoiseSpec:
    kinds: tuple = ("rotation", "crop", "gaussian")
    sigma: float = 0.05
    gain_range: tuple = (0.9, 1.1)
    crop_sides: tuple = (9, 11, 13)

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.gain_range = tuple(self.gain_range)
        self.crop_sides = tuple(self.crop_sides)
        bad = set(self.kinds) - set(NOISE_KINDS)
        if bad:
            raise ConfigError(f"unknown noise kinds {sorted(bad)}; choose from {NOISE_KINDS}")
        if self.sigma < 0:
            raise ConfigError("noise sigma must be non-negative")


@dataclass
class ModelDims:
    bands: int = 32
    classes: int = 5
    tokens: int = 4
    d_map: int = 64
    depth: int = 2
    heads: int = 8
    patch: int = 13
    spectral_kernel: int = 7
    extractor_channels: int = 8
    ffn_mult: int = 4
    patch_tokenizer: bool = False

    def __post_init__(self):
        if self.d_map % self.heads:
            raise ConfigError(f"head count {self.heads} does not divide d_map {self.d_map}")
        if self.depth < 1:
            raise ConfigError("encoder depth must be at least 1")
        if self.patch % 2 == 0:
            raise ConfigError(f"patch size must be odd, got {self.patch}")
        if self.classes < 2:
            raise ConfigError("need at least two classes")


@dataclass
class TrainConfig:
    tokens: int = 4
    d_map: int = 64
    depth: int = 2
    heads: int = 8
    patch: int = 13
    spectral_kernel: int = 7
    extractor_channels: int = 8
    lambda1: float = 1e-1
    lambda2: float = 1e0
    lr: float = 1e-3
    lr_schedule: str = "constant"  # or "cosine": per-epoch cosine decay towards zero
    batch_size: int = 32
    epochs: int = 40
    warmup_epochs: int = 1
    ema_decay: float = 0.99
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0
    # sampling of the desk-scale training/evaluation pools
    source_per_class: int = 60
    target_pool: int = 600
    # ablation switches
    no_mmd: bool = False
    no_distill: bool = False
    no_ars: bool = False
    no_coupled: bool = False
    mca: bool = False
    source_only: bool = False
    patch_tokenizer: bool = False

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseSpec(**self.noise)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * min(epoch, self.epochs) / self.epochs))

    def dims(self, bands: int, classes: int) -> ModelDims:
        return ModelDims(
            bands=bands,
            classes=classes,
            tokens=self.tokens,
            d_map=self.d_map,
            depth=self.depth,
            heads=self.heads,
            patch=self.patch,
            spectral_kernel=self.spectral_kernel,
            extractor_channels=self.extractor_channels,
            patch_tokenizer=self.patch_tokenizer,
        )

    # which loss terms / branches are live
    @property
    def use_mmd(self) -> bool:
        return not (self.no_mmd or self.source_only)

    @property
    def use_distill(self) -> bool:
        return not (self.no_distill or self.no_coupled or self.source_only)

    @property
    def use_ars(self) -> bool:
        return not (self.no_ars or self.source_only)

    @property
    def use_coupled(self) -> bool:
        return not (self.no_coupled or self.source_only) and (self.use_mmd or self.use_distill)

    @property
    def adapts_target(self) -> bool:
        """True when some loss term trains the target branch."""
        return self.use_mmd or self.use_distill or self.use_ars

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def tiny_config(**overrides) -> TrainConfig:
    """The small configuration used for exhaustive gradient checks."""
    base = dict(
        tokens=2, d_map=8, depth=1, heads=2, spectral_kernel=3, batch_size=2,
        epochs=1, source_per_class=2, target_pool=6,
    )
    base.update(overrides)
    return TrainConfig(**base)


def desk_protocol(**overrides) -> TrainConfig:
    """The reduced-cost configuration used for the ablation ladders.

    One shallow encoder, a narrow spectral extractor and a low constant learning
    rate keep a 4-row ladder over 3 seeds inside a few minutes on one core.
    """
    base = dict(
        d_map=32, depth=1, heads=4, extractor_channels=4, lr=3e-4, batch_size=20,
        epochs=25, warmup_epochs=3, ema_decay=0.9, source_per_class=40, target_pool=300,
    )
    base.update(overrides)
    return TrainConfig(**base)
