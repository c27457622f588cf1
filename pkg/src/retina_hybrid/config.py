"""Run configuration (JSON) and the model factory for the six architectures."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from torch import nn

from .backbones import BackboneConfig
from .ctran import CTran, TransformerStackConfig
from .ensemble import EnsembleV1, EnsembleV2, EnsembleWeights
from .ie_ctran import IECTran
from .ievit import IEViT, IEViTConfig

MODEL_TYPES = ("ctran", "ensemble_v1", "ensemble_v2", "ievit", "iecte", "ieect")
SAMPLERS = ("weighted", "lp_ros", "none")


class ConfigError(ValueError):
    pass


@dataclass
class EnsembleBlock:
    variant: int = 1
    a: float = 0.7
    b: float = 0.3


@dataclass
class IEViTBlock:
    patch_mode: str = "uniform"
    k: float = 1.0
    patch_size: int = 32
    layers: int = 6
    dim: int = 768
    heads: int = 8
    cnn: str = "tiny_test"
    frozen: bool = False


@dataclass
class ModelConfig:
    type: str = "ctran"
    backbone: str = "densenet201"
    backbone2: str = "resnet152d"
    pretrained: bool = False
    backbone_dim: int | None = None
    num_labels: int = 20
    image_size: int = 384
    layers: int = 6
    heads: int = 8
    embed_dim: int = 960
    ffn_dim: int | None = None
    dropout: float = 0.1
    ensemble: EnsembleBlock = field(default_factory=EnsembleBlock)
    ievit: IEViTBlock = field(default_factory=IEViTBlock)

    def validate(self) -> None:
        if self.type not in MODEL_TYPES:
            raise ConfigError(f"model.type: unknown model type {self.type!r}; expected one of {MODEL_TYPES}")
        if self.ensemble.variant not in (1, 2):
            raise ConfigError("model.ensemble.variant: must be 1 or 2")
        if self.type.startswith("ensemble_") and int(self.type[-1]) != self.ensemble.variant:
            raise ConfigError(f"model.ensemble.variant: {self.ensemble.variant} contradicts model.type {self.type}")
        try:
            EnsembleWeights(self.ensemble.a, self.ensemble.b)
            self.backbone_config(self.backbone)
            self.backbone_config(self.backbone2)
            self.stack()
            if self.type == "ievit":
                self.ievit_config()
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None

    def backbone_config(self, family: str) -> BackboneConfig:
        dim = self.backbone_dim if family == "tiny_test" else None
        return BackboneConfig(family, dim, self.pretrained)

    def stack(self) -> TransformerStackConfig:
        return TransformerStackConfig(self.layers, self.heads, self.embed_dim, self.ffn_dim, self.dropout)

    def ievit_config(self) -> IEViTConfig:
        b = self.ievit
        return IEViTConfig(
            image_size=self.image_size, patch_size=b.patch_size, patch_mode=b.patch_mode,
            dim=b.dim, layers=b.layers, heads=b.heads, ffn_dim=self.ffn_dim, dropout=self.dropout,
            k=b.k, n_labels=self.num_labels, cnn=self.backbone_config(b.cnn), dpd_frozen=b.frozen,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class AugmentBlock:
    enabled: bool = True
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation_deg: float = 15.0
    jitter: list[float] = field(default_factory=lambda: [0.4, 0.4, 0.4, 0.1])


@dataclass
class DataConfig:
    train_manifest: str | None = None
    val_manifest: str | None = None
    image_root: str | None = None
    lp_ros_pct: float = 0.10
    augment: AugmentBlock = field(default_factory=AugmentBlock)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 5e-5
    weight_decay: float = 1e-6
    t_0: int = 10
    t_mult: int = 2
    eta_min: float = 0.0
    sampler: str = "weighted"
    seed: int = 0
    eval_every: int = 1

    def validate(self) -> None:
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"train.sampler: unknown sampler {self.sampler!r}; expected one of {SAMPLERS}")
        # lr == 0 is allowed as a frozen-parameter run
        if self.eta_min < 0 or (self.lr <= self.eta_min and self.lr != 0):
            raise ConfigError("train.lr: need lr > eta_min >= 0")
        if self.t_0 < 1 or self.t_mult < 1:
            raise ConfigError("train.t_0 and train.t_mult must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        if self.data.lp_ros_pct < 0:
            raise ConfigError("data.lp_ros_pct: must be >= 0")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _from_dict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _from_dict(hint, value, key)
        else:
            kwargs[name] = _coerce(hint, value, key)
    return cls(**kwargs)


def _coerce(hint, value, key: str):
    args = typing.get_args(hint)
    optional = type(None) in args
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key}: must not be null")
    base = next((a for a in args if a is not type(None)), hint) if args and optional else hint
    origin = typing.get_origin(base)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        return [float(v) for v in value]
    if base is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if base is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    return value


def model_config_from_dict(data: dict) -> ModelConfig:
    cfg = _from_dict(ModelConfig, data, "model")
    cfg.validate()
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return _from_dict(RunConfig, data, "").validate()


def build_model(cfg: ModelConfig) -> nn.Module:
    cfg.validate()
    n, size, stack = cfg.num_labels, cfg.image_size, cfg.stack()
    b1, b2 = cfg.backbone_config(cfg.backbone), cfg.backbone_config(cfg.backbone2)
    if cfg.type == "ctran":
        return CTran(b1, stack, n, size)
    if cfg.type == "ensemble_v1":
        return EnsembleV1(b1, b2, stack, n, size, EnsembleWeights(cfg.ensemble.a, cfg.ensemble.b))
    if cfg.type == "ensemble_v2":
        return EnsembleV2(b1, b2, stack, n, size)
    if cfg.type == "ievit":
        return IEViT(cfg.ievit_config())
    variant = "IECTe" if cfg.type == "iecte" else "IeECT"
    return IECTran(variant, b1, b2, stack, n, size)
