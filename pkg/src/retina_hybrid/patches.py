"""Patch tilings for IEViT: uniform, concentric unequal, and importance-driven decomposition.

All tilings are expressed relative to a parent grid of ``BASE``-pixel squares.
Subdivided parents are replaced in-place by their children (row-major inside
the parent), so token order always follows the parent order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

BASE = 32
DPD_SIZES = (1, 2, 4, 8, 16, 32)


@dataclass(frozen=True, eq=False)
class PatchGrid:
    """Axis-aligned square patches; arrays are aligned per patch."""

    xs: np.ndarray
    ys: np.ndarray
    sizes: np.ndarray
    parents: np.ndarray
    image_size: tuple[int, int]
    # position of each patch among its parent's children (row-major)
    child_index: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.sizes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatchGrid):
            return NotImplemented
        return self.image_size == other.image_size and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("xs", "ys", "sizes", "parents")
        )

    @property
    def patches(self) -> list[tuple[int, int, int, int]]:
        return list(zip(self.xs.tolist(), self.ys.tolist(), self.sizes.tolist(), self.parents.tolist()))

    def covered_area(self) -> int:
        return int(np.sum(self.sizes.astype(np.int64) ** 2))

    def coverage_counts(self) -> np.ndarray:
        """Per-pixel count of covering patches (all ones for an exact tiling)."""
        h, w = self.image_size
        total = np.zeros((h, w), dtype=np.int64)
        for s in np.unique(self.sizes):
            m = self.sizes == s
            if np.any(self.xs[m] % s) or np.any(self.ys[m] % s) or h % s or w % s:
                # unaligned patches: rasterise one by one
                for x, y in zip(self.xs[m], self.ys[m]):
                    total[y : y + s, x : x + s] += 1
                continue
            coarse = np.zeros((h // s, w // s), dtype=np.int64)
            np.add.at(coarse, (self.ys[m] // s, self.xs[m] // s), 1)
            total += np.repeat(np.repeat(coarse, s, axis=0), s, axis=1)
        return total

    def is_exact_tiling(self) -> bool:
        h, w = self.image_size
        return self.covered_area() == h * w and bool(np.all(self.coverage_counts() == 1))

    def token_source(self) -> np.ndarray:
        return self.parents.copy()


def _image_hw(image) -> tuple[int, int]:
    shape = tuple(image.shape) if hasattr(image, "shape") else tuple(image)
    if len(shape) == 3:
        return int(shape[1]), int(shape[2])
    if len(shape) == 2:
        return int(shape[0]), int(shape[1])
    raise ValueError(f"expected a 3xHxW image or an (H, W) pair, got {shape}")


def uniform_grid(h: int, w: int, p: int) -> PatchGrid:
    if p <= 0 or h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible into {p}-px patches")
    ys, xs = np.mgrid[0:h:p, 0:w:p]
    xs, ys = xs.ravel(), ys.ravel()
    if p == BASE:
        parents = np.arange(len(xs))
    elif BASE % p == 0 and h % BASE == 0 and w % BASE == 0:
        parents = (ys // BASE) * (w // BASE) + xs // BASE
    else:
        parents = np.arange(len(xs))
    return PatchGrid(xs, ys, np.full(len(xs), p), parents, (h, w), np.zeros(len(xs), dtype=np.int64))


def uniform_patchify(image, p: int = BASE) -> PatchGrid:
    """Row-major tiling into N = H*W/p^2 patches of size p."""
    h, w = _image_hw(image)
    return uniform_grid(h, w, p)


def subdivide(base: PatchGrid, child_sizes) -> PatchGrid:
    """Replace each base patch by ``(size / child_size)^2`` children in place."""
    child_sizes = np.asarray(child_sizes, dtype=np.int64)
    if len(child_sizes) != len(base):
        raise ValueError(f"need one child size per patch: {len(child_sizes)} != {len(base)}")
    xs, ys, sizes, parents, cidx = [], [], [], [], []
    for x, y, s, parent, c in zip(base.xs, base.ys, base.sizes, base.parents, child_sizes):
        if c <= 0 or s % c:
            raise ValueError(f"child size {c} does not divide patch size {s}")
        m = s // c
        oy, ox = np.divmod(np.arange(m * m), m)
        xs.append(x + ox * c)
        ys.append(y + oy * c)
        sizes.append(np.full(m * m, c))
        parents.append(np.full(m * m, parent))
        cidx.append(np.arange(m * m))
    return PatchGrid(
        np.concatenate(xs), np.concatenate(ys), np.concatenate(sizes),
        np.concatenate(parents), base.image_size, np.concatenate(cidx),
    )


def unequal_patchify(image) -> PatchGrid:
    """Concentric layout on a 384x384 image: 32-px outer band (64 px wide),
    16-px middle band (64 px wide), 8-px central 128x128 square."""
    h, w = _image_hw(image)
    if (h, w) != (384, 384):
        raise ValueError(f"unequal patches require a 384x384 image, got {h}x{w}")
    base = uniform_grid(h, w, BASE)
    # Chebyshev ring of each 32-px cell, 0 = outermost
    cells = h // BASE
    row, col = base.ys // BASE, base.xs // BASE
    ring = np.minimum.reduce([row, col, cells - 1 - row, cells - 1 - col])
    child = np.where(ring < 2, 32, np.where(ring < 4, 16, 8))
    return subdivide(base, child)


# ---------------------------------------------------------------------------
# Dynamic patch decomposition
# ---------------------------------------------------------------------------

def normalize_importance(raw):
    """``len(raw) * softmax(raw)`` so the mean weight is exactly representable as 1."""
    if isinstance(raw, torch.Tensor):
        return raw.numel() * torch.softmax(raw, dim=-1)
    raw = np.asarray(raw, dtype=np.float64)
    e = np.exp(raw - raw.max())
    return len(raw) * e / e.sum()


@dataclass(frozen=True)
class ImportanceWeights:
    raw: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        return normalize_importance(self.raw)


def compute_npd(weights, k: float = 1.0) -> np.ndarray:
    """New patch dimension ``32 * (w_avg / w_i)^k`` with ``w_avg = 1``."""
    if k <= 0:
        raise ValueError("k must be positive")
    w = weights.normalized if isinstance(weights, ImportanceWeights) else np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("importance weights must be positive")
    return BASE * (1.0 / w) ** k


def round_npd(npd) -> np.ndarray:
    """Nearest element of {1,2,4,8,16,32}; ties go to the larger size."""
    npd = np.asarray(npd, dtype=np.float64)
    sizes = np.array(DPD_SIZES[::-1], dtype=np.float64)
    dist = np.abs(npd[..., None] - sizes)
    # argmin returns the first minimum, i.e. the larger size on a tie
    return sizes[np.argmin(dist, axis=-1)].astype(np.int64)


def child_sizes_for(npd) -> np.ndarray:
    npd = np.asarray(npd, dtype=np.float64)
    return np.where(npd > BASE, BASE, round_npd(np.minimum(npd, BASE)))


def dpd_decompose(grid: PatchGrid, npd) -> PatchGrid:
    """Subdivide each parent per its NPD; parents with NPD > 32 are kept."""
    npd = np.asarray(npd, dtype=np.float64)
    if npd.shape != (len(grid),):
        raise ValueError(f"expected {len(grid)} NPD values, got shape {npd.shape}")
    if np.any(grid.sizes != BASE):
        raise ValueError("dpd_decompose expects the uniform 32-px parent grid")
    return subdivide(grid, child_sizes_for(npd))


def extend_positional_encoding(
    e_pos: torch.Tensor,
    grid: PatchGrid,
    offsets: dict[int, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Positional rows for a decomposed grid.

    ``e_pos`` holds the class row followed by one row per parent. Each child
    receives its parent's row plus the shared offset for its (size, position)
    slot; unsplit parents keep their row unchanged.
    """
    n_parents = e_pos.shape[0] - 1
    parents = torch.as_tensor(grid.parents, dtype=torch.long, device=e_pos.device)
    if len(grid) and int(parents.max()) >= n_parents:
        raise ValueError(f"grid references parent {int(parents.max())} but only {n_parents} rows exist")
    rows = e_pos[1 + parents]
    child_index = grid.child_index if grid.child_index is not None else np.zeros(len(grid), dtype=np.int64)
    for s in np.unique(grid.sizes):
        if s == BASE:
            continue
        if offsets is None or int(s) not in offsets:
            raise ValueError(f"no offset encodings for child size {s}")
        mask = grid.sizes == s
        table = offsets[int(s)]
        if int(child_index[mask].max()) >= table.shape[0]:
            raise ValueError(f"child index out of range for size {s}")
        idx = torch.as_tensor(np.flatnonzero(mask), device=e_pos.device)
        add = table[torch.as_tensor(child_index[mask], device=e_pos.device)]
        rows = rows.index_add(0, idx, add)
    return torch.cat([e_pos[:1], rows], dim=0)


def head_token_source(grid: PatchGrid, n_parents: int, n_image_tokens: int) -> np.ndarray:
    """Map each token of [class, patches, image tokens] to its base head slot."""
    return np.concatenate([
        [0],
        1 + grid.parents,
        1 + n_parents + np.arange(n_image_tokens),
    ]).astype(np.int64)


def adapt_mlp_head(
    weight: torch.Tensor,
    bias: torch.Tensor,
    old_count: int,
    new_count: int,
    source: np.ndarray,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Re-shape a head over a flattened ``(tokens * D)`` input.

    ``source[t]`` names the old token whose column block new token ``t`` uses.
    Growing repeats parent blocks for their children (shared weights);
    shrinking drops the blocks of removed tokens.
    """
    out, cols = weight.shape
    if cols % old_count:
        raise ValueError(f"head input {cols} is not a multiple of {old_count} tokens")
    source = np.asarray(source, dtype=np.int64)
    if len(source) != new_count:
        raise ValueError(f"source map has {len(source)} entries, expected {new_count}")
    if len(source) and (source.min() < 0 or source.max() >= old_count):
        raise ValueError("source map references a token outside the old head")
    if new_count == old_count and np.array_equal(source, np.arange(old_count)):
        return weight, bias
    d = cols // old_count
    blocks = weight.view(out, old_count, d)
    new = blocks[:, torch.as_tensor(source, device=weight.device)]
    return new.reshape(out, new_count * d), bias
