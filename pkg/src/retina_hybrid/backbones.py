"""CNN feature extractors and their projections into transformer tokens."""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch
from torch import nn

FAMILIES = ("densenet201", "resnet152d", "densenet121", "efficientnetv2s", "tiny_test")

# timm model names and final channel counts
_TIMM = {
    "densenet201": ("densenet201", 1920),
    "resnet152d": ("resnet152d", 2048),
    "densenet121": ("densenet121", 1024),
    "efficientnetv2s": ("efficientnetv2_s", 1280),
}
CACHE_ENV = "RETINA_HYBRID_CACHE"


@dataclass(frozen=True)
class BackboneConfig:
    family: str = "tiny_test"
    out_dim: int | None = None
    pretrained: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "tiny_test":
            if self.out_dim is not None and not 0 < self.out_dim <= 64:
                raise ValueError("tiny_test out_dim must be in (0, 64]")
        elif self.out_dim is not None and self.out_dim != _TIMM[self.family][1]:
            raise ValueError(f"{self.family} has a fixed out_dim of {_TIMM[self.family][1]}")

    @property
    def channels(self) -> int:
        if self.family == "tiny_test":
            return self.out_dim or 32
        return _TIMM[self.family][1]

    @property
    def stride(self) -> int:
        return 16 if self.family == "tiny_test" else 32


class TinyBackbone(nn.Sequential):
    """Four stride-2 convolutions; total stride 16."""

    def __init__(self, out_dim: int = 32):
        widths = [3, 8, 16, 32, out_dim]
        layers: list[nn.Module] = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.SiLU()]
        super().__init__(*layers)


def build_feature_extractor(cfg: BackboneConfig) -> nn.Module:
    if cfg.family == "tiny_test":
        return TinyBackbone(cfg.channels)
    import timm

    cache = os.environ.get(CACHE_ENV)
    if cache:
        os.environ.setdefault("HF_HOME", cache)
        os.environ.setdefault("TORCH_HOME", cache)
    name, _ = _TIMM[cfg.family]
    return timm.create_model(name, pretrained=cfg.pretrained, num_classes=0, global_pool="")


def _check_input(images: torch.Tensor, stride: int) -> None:
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected a (batch, 3, H, W) tensor, got {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h % stride or w % stride:
        raise ValueError(f"input {h}x{w} is not divisible by backbone stride {stride}")


def extract_feature_map(images: torch.Tensor, extractor: nn.Module, cfg: BackboneConfig) -> torch.Tensor:
    """Run ``extractor`` and return a (batch, C, H/stride, W/stride) map."""
    _check_input(images, cfg.stride)
    return extractor(images)


class ClassTokenBackbone(nn.Module):
    """CNN map -> global average pool -> affine C -> n*d -> (n, batch, d)."""

    def __init__(self, cfg: BackboneConfig, n_classes: int = 20, d: int = 960):
        super().__init__()
        self.cfg = cfg
        self.n_classes = n_classes
        self.d = d
        self.features = build_feature_extractor(cfg)
        self.proj = nn.Linear(cfg.channels, n_classes * d)

    def feature_map(self, images: torch.Tensor) -> torch.Tensor:
        return extract_feature_map(images, self.features, self.cfg)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return project_to_class_tokens(self.feature_map(images), self.proj, self.n_classes, self.d)


def project_to_class_tokens(fmap: torch.Tensor, proj: nn.Linear, n_classes: int, d: int) -> torch.Tensor:
    if proj.in_features != fmap.shape[1] or proj.out_features != n_classes * d:
        raise ValueError(
            f"projection {proj.in_features}->{proj.out_features} does not map "
            f"{fmap.shape[1]} channels to {n_classes}x{d} tokens"
        )
    pooled = fmap.mean(dim=(2, 3))
    tokens = proj(pooled).view(fmap.shape[0], n_classes, d)
    return tokens.transpose(0, 1)


class ImageEmbeddingBackbone(nn.Module):
    """Stacked convolutions -> global max pool -> affine to d; one token per image."""

    def __init__(self, cfg: BackboneConfig, d: int):
        super().__init__()
        self.cfg = cfg
        self.features = build_feature_extractor(cfg)
        self.proj = nn.Linear(cfg.channels, d)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        fmap = extract_feature_map(images, self.features, self.cfg)
        return self.proj(fmap.amax(dim=(2, 3))).unsqueeze(0)


def extract_cnn_image_embedding(images: torch.Tensor, block: ImageEmbeddingBackbone) -> torch.Tensor:
    return block(images)
