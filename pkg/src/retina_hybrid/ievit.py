"""IEViT: a ViT whose sequence grows by one CNN image token after every encoder layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbones import BackboneConfig, ImageEmbeddingBackbone
from .ctran import TransformerStackConfig, build_encoder
from .patches import (
    BASE,
    DPD_SIZES,
    PatchGrid,
    compute_npd,
    dpd_decompose,
    extend_positional_encoding,
    head_token_source,
    normalize_importance,
    unequal_patchify,
    uniform_grid,
)

PATCH_MODES = ("uniform", "unequal", "dpd")


@dataclass(frozen=True)
class IEViTConfig:
    image_size: int = 384
    patch_size: int = BASE
    patch_mode: str = "uniform"
    dim: int = 768
    layers: int = 6
    heads: int = 8
    ffn_dim: int | None = None
    dropout: float = 0.1
    k: float = 1.0
    n_labels: int = 20
    cnn: BackboneConfig = BackboneConfig("tiny_test")
    dpd_frozen: bool = False

    def __post_init__(self):
        if self.patch_mode not in PATCH_MODES:
            raise ValueError(f"unknown patch mode {self.patch_mode!r}; expected one of {PATCH_MODES}")
        if self.patch_mode == "dpd" and self.patch_size != BASE:
            raise ValueError("dpd mode works on the 32-px parent grid")
        if self.k <= 0:
            raise ValueError("k must be positive")

    @property
    def stack(self) -> TransformerStackConfig:
        return TransformerStackConfig(self.layers, self.heads, self.dim, self.ffn_dim, self.dropout)


class DPDWeights(nn.Module):
    def __init__(self, n: int):
        super().__init__()
        self.weights = nn.Parameter(torch.zeros(n))

    def normalized(self) -> torch.Tensor:
        return normalize_importance(self.weights)


def _patch_tokens(images: torch.Tensor, grid: PatchGrid, embed: nn.ModuleDict, dim: int) -> torch.Tensor:
    """Embed every patch of ``grid`` with the affine map of its size -> (B, N, dim)."""
    b, c, h, w = images.shape
    out = images.new_zeros(b, len(grid), dim)
    for s in np.unique(grid.sizes):
        s = int(s)
        blocks = images.reshape(b, c, h // s, s, w // s, s).permute(0, 2, 4, 1, 3, 5)
        blocks = blocks.reshape(b, h // s, w // s, c * s * s)
        sel = np.flatnonzero(grid.sizes == s)
        rows = torch.as_tensor(grid.ys[sel] // s, device=images.device)
        cols = torch.as_tensor(grid.xs[sel] // s, device=images.device)
        emb = embed[str(s)](blocks[:, rows, cols])
        out = out.index_copy(1, torch.as_tensor(sel, device=images.device), emb)
    return out


class IEViTCore(nn.Module):
    """Transformer-side parameters (checkpoint keys ``ievit.*``)."""

    def __init__(self, cfg: IEViTConfig):
        super().__init__()
        self.cfg = cfg
        h = w = cfg.image_size
        d = cfg.dim
        if cfg.patch_mode == "uniform":
            self.base_grid = uniform_grid(h, w, cfg.patch_size)
            sizes = (cfg.patch_size,)
        elif cfg.patch_mode == "unequal":
            self.base_grid = unequal_patchify((h, w))
            sizes = (32, 16, 8)
        else:
            self.base_grid = uniform_grid(h, w, BASE)
            sizes = DPD_SIZES
        n = len(self.base_grid)
        self.n_base = n
        self.embed = nn.ModuleDict({str(s): nn.Linear(3 * s * s, d) for s in sizes})
        self.cls_token = nn.Parameter(torch.randn(1, d) * 0.02)
        self.pos = nn.Parameter(torch.randn(n + 1, d) * 0.02)
        self.encoder = build_encoder(cfg.stack)
        self.head = nn.Linear((n + 1 + cfg.layers) * d, cfg.n_labels)
        if cfg.patch_mode == "dpd":
            self.dpd = DPDWeights(n)
            self.pos_offsets = nn.ParameterDict({
                str(s): nn.Parameter(torch.randn((BASE // s) ** 2, d) * 0.02) for s in DPD_SIZES[:-1]
            })
        self._frozen_grid: PatchGrid | None = None

    def current_grid(self) -> PatchGrid:
        if self.cfg.patch_mode != "dpd":
            return self.base_grid
        if self._frozen_grid is not None:
            return self._frozen_grid
        w = self.dpd.normalized().detach().cpu().double().numpy()
        return dpd_decompose(self.base_grid, compute_npd(w, self.cfg.k))

    def freeze_grid(self, grid: PatchGrid | None = None) -> PatchGrid:
        """Pin the decomposition (current one by default); ``unfreeze_grid`` undoes it."""
        self._frozen_grid = None
        self._frozen_grid = grid if grid is not None else self.current_grid()
        return self._frozen_grid

    def unfreeze_grid(self) -> None:
        self._frozen_grid = None

    def positional(self, grid: PatchGrid) -> torch.Tensor:
        if self.cfg.patch_mode != "dpd":
            return self.pos
        offsets = {int(s): p for s, p in self.pos_offsets.items()}
        return extend_positional_encoding(self.pos, grid, offsets)

    def head_weight(self, grid: PatchGrid) -> torch.Tensor:
        if self.cfg.patch_mode != "dpd":
            return self.head.weight
        src = head_token_source(grid, self.n_base, self.cfg.layers)
        out = self.head.weight.shape[0]
        blocks = self.head.weight.view(out, self.n_base + 1 + self.cfg.layers, self.cfg.dim)
        # shared column blocks: children read their parent's block
        return blocks[:, torch.as_tensor(src, device=blocks.device)].reshape(out, -1)


class IEViT(nn.Module):
    def __init__(self, cfg: IEViTConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.image_size % cfg.cnn.stride:
            raise ValueError(f"image size {cfg.image_size} is not divisible by stride {cfg.cnn.stride}")
        self.backbone = ImageEmbeddingBackbone(cfg.cnn, cfg.dim)
        self.ievit = IEViTCore(cfg)
        if cfg.dpd_frozen:
            self.ievit.freeze_grid()
        self.last_seq_lengths: list[int] = []

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return ievit_forward(images, self)


def ievit_forward(images: torch.Tensor, model: IEViT) -> torch.Tensor:
    cfg, core = model.cfg, model.ievit
    if images.shape[-2:] != (cfg.image_size, cfg.image_size):
        raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} images, got {tuple(images.shape[-2:])}")
    grid = core.current_grid()
    b = images.shape[0]
    z_p = _patch_tokens(images, grid, core.embed, cfg.dim)
    if cfg.patch_mode == "dpd":
        w = core.dpd.normalized()
        z_p = z_p * w[torch.as_tensor(grid.parents, device=w.device)].unsqueeze(-1)
    z = torch.cat([core.cls_token.expand(b, 1, -1), z_p], dim=1) + core.positional(grid)
    z = z.transpose(0, 1)
    x_img = model.backbone(images)  # (1, B, D)
    lengths = []
    for layer in core.encoder:
        z = torch.cat([layer(z), x_img], dim=0)
        lengths.append(z.shape[0])
    model.last_seq_lengths = lengths
    flat = z.transpose(0, 1).reshape(b, -1)
    return nn.functional.linear(flat, core.head_weight(grid), core.head.bias)

