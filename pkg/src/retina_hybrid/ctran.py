"""C-Tran: CNN class tokens, 2D positional encoding, transformer, per-label heads."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbones import BackboneConfig, ClassTokenBackbone


@dataclass(frozen=True)
class TransformerStackConfig:
    layers: int = 6
    heads: int = 8
    d: int = 960
    ffn_dim: int | None = None
    dropout: float = 0.1

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"embedding dim {self.d} is not divisible by {self.heads} heads")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.d


def encoder_layer(cfg: TransformerStackConfig) -> nn.TransformerEncoderLayer:
    # (tokens, batch, d) layout throughout
    return nn.TransformerEncoderLayer(
        cfg.d, cfg.heads, cfg.ffn, cfg.dropout, activation="gelu", batch_first=False
    )


def build_encoder(cfg: TransformerStackConfig) -> nn.ModuleList:
    return nn.ModuleList(encoder_layer(cfg) for _ in range(cfg.layers))


def positional_encoding_2d(hp: int, wp: int, d: int) -> np.ndarray:
    """Grid (hp, wp, d): sin(i / 10000^(2k/d)) for even k, cos(j / 10000^(2k/d)) for odd k."""
    if d % 2:
        raise ValueError(f"positional encoding dim must be even, got {d}")
    k = np.arange(d)
    denom = 10000.0 ** (2.0 * k / d)
    i = np.arange(hp)[:, None, None]
    j = np.arange(wp)[None, :, None]
    even = np.broadcast_to(np.sin(i / denom), (hp, wp, d))
    odd = np.broadcast_to(np.cos(j / denom), (hp, wp, d))
    return np.where(k % 2 == 0, even, odd)


class PositionalReduction(nn.Module):
    """Learned affine map from the flattened (hp*wp, d) grid to (n_tokens, d)."""

    def __init__(self, hp: int, wp: int, d: int, n_tokens: int):
        super().__init__()
        grid = positional_encoding_2d(hp, wp, d).reshape(hp * wp, d)
        self.register_buffer("grid", torch.tensor(grid, dtype=torch.float32), persistent=False)
        self.reduce = nn.Linear(hp * wp, n_tokens)

    def reduced(self) -> torch.Tensor:
        # (n_tokens, d)
        return self.reduce(self.grid.T).T

    def forward(self, x_visual: torch.Tensor) -> torch.Tensor:
        return reduce_and_add_positional(x_visual, self)


def reduce_and_add_positional(x_visual: torch.Tensor, pe: PositionalReduction) -> torch.Tensor:
    reduced = pe.reduced()
    if reduced.shape != x_visual.shape[::2]:
        raise ValueError(
            f"positional encoding {tuple(reduced.shape)} does not match tokens "
            f"{tuple(x_visual.shape)}"
        )
    return x_visual + reduced.unsqueeze(1)


class LabelHeads(nn.Module):
    """One independent d -> 1 affine map per label token."""

    def __init__(self, n_labels: int, d: int):
        super().__init__()
        bound = 1.0 / math.sqrt(d)
        self.weight = nn.Parameter(torch.empty(n_labels, d).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(n_labels).uniform_(-bound, bound))

    def forward(self, label_tokens: torch.Tensor) -> torch.Tensor:
        # label_tokens: (n_labels, batch, d) -> (batch, n_labels)
        return torch.einsum("nbd,nd->bn", label_tokens, self.weight) + self.bias


class CTranBlock(nn.Module):
    """Positional encoding, encoder stack and heads (checkpoint keys ``ctran.*``)."""

    def __init__(self, n_tokens: int, n_labels: int, hp: int, wp: int, stack: TransformerStackConfig):
        super().__init__()
        self.n_labels = n_labels
        self.pe = PositionalReduction(hp, wp, stack.d, n_tokens)
        self.encoder = build_encoder(stack)
        self.heads = LabelHeads(n_labels, stack.d)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        z = self.pe(tokens)
        for layer in self.encoder:
            z = layer(z)
        return z

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        z = self.encode(tokens)
        return self.heads(z[: self.n_labels])


def feature_grid(image_size: int, cfg: BackboneConfig) -> tuple[int, int]:
    if image_size % cfg.stride:
        raise ValueError(f"image size {image_size} is not divisible by stride {cfg.stride}")
    return image_size // cfg.stride, image_size // cfg.stride


class CTran(nn.Module):
    """Single-backbone C-Tran returning raw logits (batch, n_labels)."""

    def __init__(
        self,
        backbone: BackboneConfig,
        stack: TransformerStackConfig,
        n_labels: int = 20,
        image_size: int = 384,
    ):
        super().__init__()
        hp, wp = feature_grid(image_size, backbone)
        self.backbone = ClassTokenBackbone(backbone, n_labels, stack.d)
        self.ctran = CTranBlock(n_labels, n_labels, hp, wp, stack)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.ctran(self.backbone(images))


def ctran_forward(images: torch.Tensor, model: CTran) -> torch.Tensor:
    return model(images)


def predict(logits: torch.Tensor, threshold: float = 0.5) -> tuple[torch.Tensor, torch.Tensor]:
    """Sigmoid probabilities and ``p >= threshold`` decisions."""
    p = torch.sigmoid(logits)
    return p, p >= threshold
