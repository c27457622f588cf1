"""Iterative-expansion C-Tran hybrids.

IECTe feeds both backbones' tokens ``[x, y]`` to the transformer and re-appends
that pair after every layer past the first. IeECT feeds only ``x`` and appends
``y``. The positional encoding is added once, to the initial sequence, and the
label heads read the first ``n_labels`` tokens of the final sequence.
"""

from __future__ import annotations

import torch
from torch import nn

from .backbones import BackboneConfig, ClassTokenBackbone
from .ctran import LabelHeads, PositionalReduction, TransformerStackConfig, build_encoder, feature_grid

VARIANTS = ("IECTe", "IeECT")


class IECTran(nn.Module):
    def __init__(
        self,
        variant: str,
        backbone1: BackboneConfig,
        backbone2: BackboneConfig,
        stack: TransformerStackConfig,
        n_labels: int = 20,
        image_size: int = 384,
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if stack.layers < 1:
            raise ValueError("iterative expansion needs at least one encoder layer")
        self.variant = variant
        self.n_labels = n_labels
        hp, wp = feature_grid(image_size, backbone1)
        feature_grid(image_size, backbone2)
        self.path1 = ClassTokenBackbone(backbone1, n_labels, stack.d)
        self.path2 = ClassTokenBackbone(backbone2, n_labels, stack.d)
        n0 = 2 * n_labels if variant == "IECTe" else n_labels
        self.pe = PositionalReduction(hp, wp, stack.d, n0)
        self.encoder = build_encoder(stack)
        self.heads = LabelHeads(n_labels, stack.d)
        self.last_seq_lengths: list[int] = []

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x, y = self.path1(images), self.path2(images)
        if x.shape[-1] != y.shape[-1]:
            raise ValueError(f"embedding dim mismatch: {x.shape[-1]} vs {y.shape[-1]}")
        return self.expand(x, y)

    def expand(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        """Run the expansion loop on precomputed backbone tokens."""
        if self.variant == "IECTe":
            z0 = torch.cat([x, y], dim=0)
            extra = z0
        else:
            z0, extra = x, y
        z = self.pe(z0)
        lengths = []
        for l, layer in enumerate(self.encoder):
            if l:
                z = torch.cat([z, extra], dim=0)
            z = layer(z)
            lengths.append(z.shape[0])
        self.last_seq_lengths = lengths
        return self.heads(z[: self.n_labels])


def iecte_forward(images: torch.Tensor, model: IECTran) -> torch.Tensor:
    if model.variant != "IECTe":
        raise ValueError("model is not an IECTe instance")
    return model(images)


def ieect_forward(images: torch.Tensor, model: IECTran) -> torch.Tensor:
    if model.variant != "IeECT":
        raise ValueError("model is not an IeECT instance")
    return model(images)
