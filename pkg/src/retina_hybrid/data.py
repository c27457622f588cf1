"""Dataset manifests, imbalance-aware sampling and the augmentation stack."""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF
from PIL import Image, ImageDraw

LABEL_NAMES: tuple[str, ...] = (
    "DR", "NORMAL", "MH", "ODC", "TSLN", "ARMD", "DN", "MYA", "BRVO", "ODP",
    "CRVO", "CNV", "RS", "ODE", "LS", "CSR", "HTR", "ASR", "CRS", "OTHER",
)
NUM_LABELS = len(LABEL_NAMES)
NORMAL_INDEX = LABEL_NAMES.index("NORMAL")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ManifestError(ValueError):
    """Raised for unreadable or malformed manifests."""


def _validate_bits(bits: Sequence[int], where: str) -> tuple[int, ...]:
    bits = tuple(int(b) for b in bits)
    if len(bits) != NUM_LABELS:
        raise ManifestError(f"{where}: expected {NUM_LABELS} labels, got {len(bits)}")
    if any(b not in (0, 1) for b in bits):
        raise ManifestError(f"{where}: label values must be 0 or 1")
    if not any(bits):
        raise ManifestError(f"{where}: at least one label must be positive")
    return bits


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[tuple[str, tuple[int, ...]], ...]
    label_names: tuple[str, ...] = LABEL_NAMES
    split: str = "train"

    def __post_init__(self):
        if tuple(self.label_names) != LABEL_NAMES:
            raise ManifestError("label columns must be " + ",".join(LABEL_NAMES))
        if self.split not in ("train", "validation"):
            raise ManifestError(f"unknown split {self.split!r}")
        for i, (_, bits) in enumerate(self.entries):
            _validate_bits(bits, f"row {i}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.entries]

    def label_matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, NUM_LABELS), dtype=np.int64)
        return np.array([bits for _, bits in self.entries], dtype=np.int64)

    def resolve(self, path: str, root: str | Path | None) -> Path:
        p = Path(path)
        if root is not None and not p.is_absolute():
            p = Path(root) / p
        return p


def load_manifest(path: str | Path, split: str = "train") -> DatasetManifest:
    """Read a manifest CSV (``image,DR,NORMAL,...,OTHER``).

    Raises ``FileNotFoundError`` for a missing file and ``ManifestError``
    naming the 0-based data row for malformed content.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if len(header) != NUM_LABELS + 1 or tuple(header[1:]) != LABEL_NAMES:
            raise ManifestError(f"{path}: header must be image," + ",".join(LABEL_NAMES))
        entries = []
        for i, row in enumerate(reader):
            if not row:
                continue
            if len(row) != NUM_LABELS + 1:
                raise ManifestError(
                    f"row {i}: expected {NUM_LABELS + 1} columns, got {len(row)}"
                )
            try:
                bits = [int(v) for v in row[1:]]
            except ValueError:
                raise ManifestError(f"row {i}: non-integer label value") from None
            entries.append((row[0], _validate_bits(bits, f"row {i}")))
    return DatasetManifest(tuple(entries), LABEL_NAMES, split)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("image",) + LABEL_NAMES)
        for img, bits in manifest.entries:
            writer.writerow((img,) + tuple(bits))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def weighted_sample_weights(manifest: DatasetManifest) -> list[float]:
    """Per-sample weight: mean over positive labels of ``N / count(label)``."""
    if len(manifest) == 0:
        raise ManifestError("cannot weight an empty manifest")
    y = manifest.label_matrix()
    n = y.shape[0]
    counts = y.sum(axis=0)
    weights = []
    for row in y:
        inv = [n / counts[j] for j in np.flatnonzero(row) if counts[j] > 0]
        weights.append(float(sum(inv) / len(inv)))
    return weights


def lp_ros_oversample(
    manifest: DatasetManifest, pct: float = 0.10, seed: int = 0
) -> DatasetManifest:
    """Label-powerset random oversampling.

    Samples are grouped by their exact label set. ``ceil(pct * N)`` duplicates
    are drawn with replacement from the below-mean-size groups, filling the
    smallest group first: each group is topped up towards the mean size before
    moving to the next one. Original entries keep their order and come first.
    """
    if pct < 0:
        raise ValueError("pct must be >= 0")
    n = len(manifest)
    n_new = math.ceil(pct * n)
    if n_new == 0:
        return manifest
    groups: dict[tuple[int, ...], list[int]] = defaultdict(list)
    for i, (_, bits) in enumerate(manifest.entries):
        groups[bits].append(i)
    mean_size = n / len(groups)
    minority = sorted(
        (key for key, idx in groups.items() if len(idx) < mean_size),
        key=lambda k: (len(groups[k]), k),
    )
    if not minority:
        minority = sorted(groups, key=lambda k: (len(groups[k]), k))[:1]
    rng = np.random.default_rng(seed)
    extra: list[int] = []
    remaining = n_new
    while remaining > 0:
        for key in minority:
            if remaining == 0:
                break
            deficit = max(1, math.ceil(mean_size) - len(groups[key]))
            take = min(deficit, remaining)
            extra.extend(int(i) for i in rng.choice(groups[key], size=take, replace=True))
            remaining -= take
    new_entries = manifest.entries + tuple(manifest.entries[i] for i in extra)
    return DatasetManifest(new_entries, manifest.label_names, manifest.split)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    rotation_deg: float = 15.0
    jitter: tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    resize: tuple[int, int] = (384, 384)
    normalize_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: tuple[float, float, float] = IMAGENET_STD
    seed: int = 0

    def __post_init__(self):
        for p in (self.hflip_p, self.vflip_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability out of range: {p}")
        if len(self.resize) != 2 or min(self.resize) <= 0:
            raise ValueError(f"resize dims must be positive: {self.resize}")
        if any(s <= 0 for s in self.normalize_std):
            raise ValueError("normalize_std entries must be > 0")

    @classmethod
    def deterministic(cls, resize: tuple[int, int] = (384, 384), **kw) -> "AugmentConfig":
        """Resize + normalize only, used for evaluation."""
        return cls(0.0, 0.0, 0.0, (0.0, 0.0, 0.0, 0.0), tuple(resize), **kw)


def augment(
    image: np.ndarray,
    cfg: AugmentConfig,
    draw: np.random.Generator,
    max_value: float = 1.0,
) -> np.ndarray:
    """Apply flip/flip/rotate/jitter/resize/normalize to an HxWx3 image.

    ``max_value`` declares the pixel scale of the input (1.0 or 255).
    Returns a float32 3xHxW array.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ValueError("zero-size image")
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32) / max_value)
    x = x.permute(2, 0, 1).contiguous()

    # draws happen unconditionally so the random stream does not depend on cfg
    u_h, u_v = draw.random(2)
    angle = draw.uniform(-1.0, 1.0) * cfg.rotation_deg
    bri, con, sat = (1.0 + draw.uniform(-1.0, 1.0) * j for j in cfg.jitter[:3])
    hue = draw.uniform(-1.0, 1.0) * cfg.jitter[3]

    if u_h < cfg.hflip_p:
        x = TF.horizontal_flip(x)
    if u_v < cfg.vflip_p:
        x = TF.vertical_flip(x)
    if cfg.rotation_deg:
        x = TF.rotate(x, float(angle), interpolation=TF.InterpolationMode.BILINEAR)
    if cfg.jitter[0]:
        x = TF.adjust_brightness(x, float(bri))
    if cfg.jitter[1]:
        x = TF.adjust_contrast(x, float(con))
    if cfg.jitter[2]:
        x = TF.adjust_saturation(x, float(sat))
    if cfg.jitter[3]:
        x = TF.adjust_hue(x, float(hue))
    if tuple(x.shape[1:]) != tuple(cfg.resize):
        x = TF.resize(x, list(cfg.resize), antialias=True)
    mean = torch.tensor(cfg.normalize_mean, dtype=x.dtype).view(3, 1, 1)
    std = torch.tensor(cfg.normalize_std, dtype=x.dtype).view(3, 1, 1)
    return ((x - mean) / std).numpy()


def read_image(path: str | Path) -> np.ndarray:
    """Load an image file as an HxWx3 uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


# ---------------------------------------------------------------------------
# Synthetic fundus-like data
# ---------------------------------------------------------------------------

def _label_marginals(skew: float, base: float = 0.3) -> np.ndarray:
    # geometric decay in label index; skew=0 is uniform
    return base * np.exp(-5.0 * skew * np.arange(NUM_LABELS) / (NUM_LABELS - 1))


def _marker_colour(k: int) -> tuple[int, int, int]:
    hue = (k * 7) % NUM_LABELS / NUM_LABELS
    r, g, b = (int(255 * (0.5 + 0.5 * math.cos(2 * math.pi * (hue + off)))) for off in (0, 1 / 3, 2 / 3))
    return r, g, b


def render_fundus(bits: Sequence[int], size: int, rng: np.random.Generator) -> Image.Image:
    """Draw an orange disc on black with one marker per positive label."""
    im = Image.new("RGB", (size, size), (0, 0, 0))
    d = ImageDraw.Draw(im)
    jitter = rng.uniform(-0.02, 0.02, size=2) * size
    cx, cy = size / 2 + jitter[0], size / 2 + jitter[1]
    r = 0.46 * size
    d.ellipse((cx - r, cy - r, cx + r, cy + r), fill=(190, 90, 40))
    # 5x4 lattice of marker slots inside the disc
    cell = 0.56 * size / 5
    half = max(1.0, cell * 0.35)
    for k, bit in enumerate(bits):
        if not bit:
            continue
        row, col = divmod(k, 5)
        mx = cx + (col - 2) * cell
        my = cy + (row - 1.5) * cell
        d.rectangle((mx - half, my - half, mx + half, my + half), fill=_marker_colour(k))
    return im


def generate_synthetic_dataset(
    n: int,
    seed: int,
    class_skew: float,
    out_dir: str | Path,
    image_size: int = 64,
    split: str = "train",
    manifest_name: str = "manifest.csv",
) -> DatasetManifest:
    """Write ``n`` procedural images plus ``manifest_name`` into ``out_dir``.

    Label marginals decay geometrically with label index at a rate set by
    ``class_skew``; rows with no drawn label are marked NORMAL.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    p = _label_marginals(class_skew)
    entries = []
    for i in range(n):
        bits = (rng.random(NUM_LABELS) < p).astype(int)
        if not bits.any():
            bits[NORMAL_INDEX] = 1
        name = f"img_{i:05d}.png"
        render_fundus(bits, image_size, rng).save(out_dir / name, optimize=False)
        entries.append((name, tuple(int(b) for b in bits)))
    manifest = DatasetManifest(tuple(entries), LABEL_NAMES, split)
    save_manifest(manifest, out_dir / manifest_name)
    return manifest


def label_counts(manifest: DatasetManifest) -> Counter:
    y = manifest.label_matrix()
    return Counter({name: int(c) for name, c in zip(LABEL_NAMES, y.sum(axis=0))})
