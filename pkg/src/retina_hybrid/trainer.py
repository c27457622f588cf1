"""Training loop, cosine warm-restart schedule, checkpoints and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import save_file
from torch import nn

from .config import ModelConfig, TrainConfig, build_model, model_config_from_dict
from .data import (
    AugmentConfig,
    DatasetManifest,
    augment,
    lp_ros_oversample,
    read_image,
    weighted_sample_weights,
)
from .ensemble import EnsembleV1, combined_loss
from .metrics import MetricsReport, compute_report

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "loss", "ml_map", "ml_f1", "ml_auc", "bin_auc", "ml_score", "model_score")
CHECKPOINT_FORMAT = "retina-hybrid-checkpoint/1"


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: Path | None):
        super().__init__(msg)
        self.last_good = last_good


class CheckpointMismatch(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Loss and schedule
# ---------------------------------------------------------------------------

def bce_logits_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy in the stable form max(z,0) - z*t + log(1 + e^-|z|)."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    targets = targets.to(logits.dtype)
    return (logits.clamp(min=0) - logits * targets + torch.log1p(torch.exp(-logits.abs()))).mean()


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int = 1) -> float:
    """Cosine annealing with warm restarts; cycle i lasts ``t_0 * t_mult**i`` epochs."""
    if step < 0:
        raise ValueError("step must be >= 0")
    t_i = cfg.t_0 * steps_per_epoch
    t = step
    while t >= t_i:
        t -= t_i
        t_i *= cfg.t_mult
    return cfg.eta_min + (cfg.lr - cfg.eta_min) * (1 + math.cos(math.pi * t / t_i)) / 2


# ---------------------------------------------------------------------------
# Model-type dispatch
# ---------------------------------------------------------------------------

def model_loss(model: nn.Module, images: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    if isinstance(model, EnsembleV1):
        out = model(images)
        return combined_loss(bce_logits_loss(out.logits_dn, targets), bce_logits_loss(out.logits_rn, targets), model.weights)
    return bce_logits_loss(model(images), targets)


def predict_proba(model: nn.Module, images: torch.Tensor) -> torch.Tensor:
    if isinstance(model, EnsembleV1):
        return model(images).p_c
    return torch.sigmoid(model(images))


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

class ImageSet:
    """Decoded images kept in memory (desk-scale datasets)."""

    def __init__(self, manifest: DatasetManifest, image_root: str | Path | None, image_size: int):
        self.manifest = manifest
        self.image_size = image_size
        self._raw: dict[str, np.ndarray] = {}
        for p in dict.fromkeys(manifest.paths):
            path = manifest.resolve(p, image_root)
            try:
                self._raw[p] = read_image(path)
            except (OSError, ValueError) as exc:
                raise FileNotFoundError(f"cannot read image {path}: {exc}") from None
        self.targets = torch.tensor(manifest.label_matrix(), dtype=torch.float32)
        self._plain = AugmentConfig.deterministic((image_size, image_size))
        self._cache: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.manifest)

    def plain(self) -> torch.Tensor:
        if self._cache is None:
            rng = np.random.default_rng(0)
            self._cache = torch.from_numpy(np.stack([
                augment(self._raw[p], self._plain, rng, max_value=255.0) for p in self.manifest.paths
            ]))
        return self._cache

    def batch(self, idx, aug: AugmentConfig | None, rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        if aug is None:
            images = self.plain()[idx]
        else:
            images = torch.from_numpy(np.stack([
                augment(self._raw[self.manifest.paths[i]], aug, rng, max_value=255.0) for i in idx
            ]))
        return images, self.targets[idx]


def epoch_order(n: int, sampler: str, weights: list[float] | None, gen: torch.Generator) -> torch.Tensor:
    if sampler == "weighted":
        return torch.multinomial(torch.tensor(weights, dtype=torch.double), n, replacement=True, generator=gen)
    return torch.randperm(n, generator=gen)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    model_cfg: ModelConfig,
    optimizer: torch.optim.Optimizer | None = None,
    epoch: int = 0,
    history: list[dict] | None = None,
) -> Path:
    """Single safetensors container: named arrays plus a string metadata block."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    opt_meta = {}
    if optimizer is not None:
        state = optimizer.state_dict()
        for pid, pstate in state["state"].items():
            for name, value in pstate.items():
                if torch.is_tensor(value):
                    tensors[f"optim.{pid}.{name}"] = value.detach().contiguous().clone()
        opt_meta = {"param_groups": state["param_groups"]}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": json.dumps(model_cfg.to_dict(), sort_keys=True),
        "config_hash": model_cfg.digest(),
        "epoch": str(epoch),
        "history": json.dumps(history or []),
        "optimizer": json.dumps(opt_meta),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    save_file(tensors, str(path), metadata=meta)
    return path


@dataclass
class Checkpoint:
    model_config: ModelConfig
    state: dict[str, torch.Tensor]
    optimizer_state: dict[str, torch.Tensor]
    metadata: dict[str, str]
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointMismatch(f"{path} is not a {CHECKPOINT_FORMAT} file")
        state, optim = {}, {}
        for key in fh.keys():
            (optim if key.startswith("optim.") else state)[key] = fh.get_tensor(key)
    cfg = model_config_from_dict(json.loads(meta["model_config"]))
    return Checkpoint(cfg, state, optim, meta, int(meta.get("epoch", 0)), json.loads(meta.get("history", "[]")))


def load_model(path: str | Path, expected: ModelConfig | None = None) -> tuple[nn.Module, ModelConfig]:
    """Rebuild the model stored at ``path`` in eval mode.

    Raises ``CheckpointMismatch`` when ``expected`` describes a different
    architecture or the stored arrays do not fit the rebuilt model.
    """
    ckpt = read_checkpoint(path)
    if expected is not None and expected.digest() != ckpt.model_config.digest():
        raise CheckpointMismatch("checkpoint architecture differs from the supplied model config")
    model = build_model(ckpt.model_config)
    try:
        model.load_state_dict(ckpt.state, strict=True)
    except RuntimeError as exc:
        raise CheckpointMismatch(str(exc)) from None
    model.eval()
    return model, ckpt.model_config


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict]
    best_checkpoint: Path | None
    last_checkpoint: Path | None


def _history_row(epoch: int, loss: float, report: MetricsReport | None) -> dict:
    row = {"epoch": epoch, "loss": loss}
    for k in HISTORY_FIELDS[2:]:
        row[k] = getattr(report, k) if report is not None else None
    return row


def _append_history(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow({k: ("" if row[k] is None else row[k]) for k in HISTORY_FIELDS})


def train(
    model_cfg: ModelConfig,
    train_set: DatasetManifest | ImageSet,
    cfg: TrainConfig,
    val_set: DatasetManifest | ImageSet | None = None,
    image_root: str | Path | None = None,
    augment_cfg: AugmentConfig | None = None,
    out_dir: str | Path | None = None,
    lp_ros_pct: float = 0.10,
    model: nn.Module | None = None,
) -> TrainResult:
    """Optimise ``model_cfg``'s architecture on ``train_set``.

    Each epoch draws an order from the configured sampler, steps AdamW with
    the per-step warm-restart learning rate and, every ``cfg.eval_every``
    epochs, scores the validation split (the training split when none is
    given). The checkpoint with the best model score is kept as ``best``.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    if isinstance(train_set, DatasetManifest):
        manifest = train_set
        if cfg.sampler == "lp_ros":
            manifest = lp_ros_oversample(manifest, lp_ros_pct, cfg.seed)
        train_set = ImageSet(manifest, image_root, model_cfg.image_size)
    if isinstance(val_set, DatasetManifest):
        val_set = ImageSet(val_set, image_root, model_cfg.image_size)
    eval_set = val_set if val_set is not None else train_set

    if model is None:
        model = build_model(model_cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    weights = weighted_sample_weights(train_set.manifest) if cfg.sampler == "weighted" else None
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    out = Path(out_dir) if out_dir is not None else None
    history_path = best_path = last_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        history_path = out / "history.csv"
        if history_path.exists():
            history_path.unlink()
        best_path, last_path = out / "best.safetensors", out / "last.safetensors"

    history: list[dict] = []
    best_score = -math.inf
    last_good: Path | None = None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = epoch_order(n, cfg.sampler, weights, gen)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images, targets = train_set.batch(idx, augment_cfg, rng)
            for group in optimizer.param_groups:
                group["lr"] = lr_at(step, cfg, steps_per_epoch)
            try:
                loss = model_loss(model, images, targets)
            except ValueError as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}", last_good) from None
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            total += loss.item() * len(idx)
            seen += len(idx)
        epoch_loss = total / max(seen, 1)

        report = None
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report = evaluate_model(model, eval_set)
        row = _history_row(epoch, epoch_loss, report)
        history.append(row)
        log.info("epoch %d loss %.5f%s", epoch, epoch_loss,
                 f" model_score {report.model_score:.4f}" if report else "")
        if out is not None:
            _append_history(history_path, row)
            score = report.model_score if report is not None else -math.inf
            if report is not None and math.isfinite(score) and score > best_score:
                best_score = score
                save_checkpoint(best_path, model, model_cfg, optimizer, epoch, history)
            save_checkpoint(last_path, model, model_cfg, optimizer, epoch, history)
            last_good = last_path
    if out is not None and not best_path.exists() and last_path.exists():
        best_path.write_bytes(last_path.read_bytes())
    model.eval()
    return TrainResult(model, history, best_path, last_path)


@torch.no_grad()
def predict_set(model: nn.Module, data: ImageSet, batch_size: int = 16) -> np.ndarray:
    model.eval()
    images = data.plain()
    probs = [predict_proba(model, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(probs).double().numpy()


def evaluate_model(model: nn.Module, data: ImageSet, threshold: float = 0.5) -> MetricsReport:
    probs = predict_set(model, data)
    labels = data.targets.numpy()
    if probs.shape[1] != labels.shape[1]:
        raise CheckpointMismatch(f"model predicts {probs.shape[1]} labels, dataset has {labels.shape[1]}")
    return compute_report(probs, labels, threshold=threshold)


def evaluate(
    checkpoint: str | Path,
    dataset: DatasetManifest,
    image_root: str | Path | None = None,
    expected: ModelConfig | None = None,
    threshold: float = 0.5,
) -> MetricsReport:
    model, cfg = load_model(checkpoint, expected)
    return evaluate_model(model, ImageSet(dataset, image_root, cfg.image_size), threshold)
