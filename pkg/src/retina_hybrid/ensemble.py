"""Two-backbone C-Tran ensembles.

Variant 1 runs two complete C-Tran paths and mixes their sigmoid outputs with
fixed weights; variant 2 concatenates both backbones' class tokens and runs a
single transformer over them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .backbones import BackboneConfig, ClassTokenBackbone
from .ctran import CTran, CTranBlock, TransformerStackConfig, feature_grid


@dataclass(frozen=True)
class EnsembleWeights:
    a: float = 0.7
    b: float = 0.3

    def __post_init__(self):
        if self.a < 0 or self.b < 0 or not math.isclose(self.a + self.b, 1.0, abs_tol=1e-12):
            raise ValueError(f"ensemble weights must be non-negative and sum to 1, got ({self.a}, {self.b})")


class EnsembleOutput(NamedTuple):
    p_c: torch.Tensor
    p_dn: torch.Tensor
    p_rn: torch.Tensor
    logits_dn: torch.Tensor
    logits_rn: torch.Tensor


def combine_predictions(p_dn: torch.Tensor, p_rn: torch.Tensor, w: EnsembleWeights) -> torch.Tensor:
    return w.a * p_dn + w.b * p_rn


def combined_loss(l_dn, l_rn, w: EnsembleWeights):
    """``a * l_dn + b * l_rn``; works on floats and scalar tensors alike."""
    for v in (l_dn, l_rn):
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(v):
            raise ValueError(f"non-finite path loss: {v}")
    return w.a * l_dn + w.b * l_rn


class EnsembleV1(nn.Module):
    def __init__(
        self,
        backbone1: BackboneConfig,
        backbone2: BackboneConfig,
        stack: TransformerStackConfig,
        n_labels: int = 20,
        image_size: int = 384,
        weights: EnsembleWeights = EnsembleWeights(),
    ):
        super().__init__()
        self.weights = weights
        self.path1 = CTran(backbone1, stack, n_labels, image_size)
        self.path2 = CTran(backbone2, stack, n_labels, image_size)

    def forward(self, images: torch.Tensor) -> EnsembleOutput:
        return ensemble_v1_forward(images, self.path1, self.path2, self.weights)


def ensemble_v1_forward(
    images: torch.Tensor, path1: CTran, path2: CTran, w: EnsembleWeights
) -> EnsembleOutput:
    logits_dn = path1(images)
    logits_rn = path2(images)
    if logits_dn.shape != logits_rn.shape:
        raise ValueError(f"label count mismatch: {tuple(logits_dn.shape)} vs {tuple(logits_rn.shape)}")
    p_dn, p_rn = torch.sigmoid(logits_dn), torch.sigmoid(logits_rn)
    return EnsembleOutput(combine_predictions(p_dn, p_rn, w), p_dn, p_rn, logits_dn, logits_rn)


class EnsembleV2(nn.Module):
    """Tokens of both backbones concatenated to (2n, b, d); heads read the first n."""

    def __init__(
        self,
        backbone1: BackboneConfig,
        backbone2: BackboneConfig,
        stack: TransformerStackConfig,
        n_labels: int = 20,
        image_size: int = 384,
    ):
        super().__init__()
        hp, wp = feature_grid(image_size, backbone1)
        feature_grid(image_size, backbone2)
        self.path1 = ClassTokenBackbone(backbone1, n_labels, stack.d)
        self.path2 = ClassTokenBackbone(backbone2, n_labels, stack.d)
        self.ctran = CTranBlock(2 * n_labels, n_labels, hp, wp, stack)

    def tokens(self, images: torch.Tensor) -> torch.Tensor:
        x_dn, x_rn = self.path1(images), self.path2(images)
        if x_dn.shape[-1] != x_rn.shape[-1]:
            raise ValueError(f"embedding dim mismatch: {x_dn.shape[-1]} vs {x_rn.shape[-1]}")
        return torch.cat([x_dn, x_rn], dim=0)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.ctran(self.tokens(images))


def ensemble_v2_forward(images: torch.Tensor, model: EnsembleV2) -> torch.Tensor:
    return model(images)
