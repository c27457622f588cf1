"""Multi-label evaluation: per-label AUC/F1/AP, ML and Bin aggregates, composites, ROC."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .data import LABEL_NAMES, NORMAL_INDEX

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. a single class present)."""


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    return s, y.astype(bool)


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_at_threshold(scores, labels, threshold: float = 0.5) -> float:
    s, y = _binary_inputs(scores, labels)
    if len(s) == 0:
        raise ValueError("empty input")
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 or tp == 0 else 2.0 * tp / denom


def average_precision(scores, labels) -> float:
    """Non-interpolated AP over the descending-score ranking (stable on ties)."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-s, kind="stable")
    rel = y[order]
    hits = np.cumsum(rel)
    precision_at_k = hits / np.arange(1, len(rel) + 1)
    return float(precision_at_k[rel].sum() / n_pos)


def roc_points(scores, labels) -> list[tuple[float, float]]:
    """(fpr, tpr) at every distinct threshold, from (0, 0) to (1, 1)."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    points = [(0.0, 0.0)]
    points += [(fp / n_neg, tp / n_pos) for fp, tp in zip(fps.tolist(), tps.tolist())]
    return points


def roc_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


@dataclass
class LabelMetrics:
    auc: float | None
    f1: float
    ap: float | None


@dataclass
class MetricsReport:
    per_label: dict[str, LabelMetrics]
    ml_map: float
    ml_f1: float
    ml_auc: float
    bin_auc: float
    bin_f1: float
    ml_score: float
    model_score: float
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_label"] = {k: LabelMetrics(**v) for k, v in d["per_label"].items()}
        return cls(**d)

    def composites_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.ml_score, self.model_score))


def ml_score(ml_map: float, ml_auc: float) -> float:
    return (ml_map + ml_auc) / 2.0


def model_score(ml_score_value: float, bin_auc: float) -> float:
    return (ml_score_value + bin_auc) / 2.0


def composite_scores(ml_map: float, ml_auc: float, bin_auc: float) -> tuple[float, float]:
    s = ml_score(ml_map, ml_auc)
    return s, model_score(s, bin_auc)


def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def compute_report(
    score_matrix,
    label_matrix,
    label_names=LABEL_NAMES,
    normal_index: int = NORMAL_INDEX,
    threshold: float = 0.5,
) -> MetricsReport:
    """Per-label metrics plus ML (non-NORMAL mean) and Bin (NORMAL) scores.

    Labels whose AUC/AP are undefined on this split are left out of the ML
    averages and listed in ``skipped``.
    """
    s = np.asarray(score_matrix, dtype=np.float64)
    y = np.asarray(label_matrix)
    if s.shape != y.shape or s.ndim != 2 or s.shape[1] != len(label_names):
        raise ValueError(f"score/label matrices must both be (samples, {len(label_names)}); "
                         f"got {s.shape} and {y.shape}")
    per_label: dict[str, LabelMetrics] = {}
    skipped = []
    for j, name in enumerate(label_names):
        try:
            auc = binary_auc(s[:, j], y[:, j])
        except UndefinedMetricError:
            auc = None
        try:
            ap = average_precision(s[:, j], y[:, j])
        except UndefinedMetricError:
            ap = None
        if auc is None or ap is None:
            skipped.append(name)
            log.warning("label %s has a single class in this split; skipped from aggregates", name)
        per_label[name] = LabelMetrics(auc, f1_at_threshold(s[:, j], y[:, j], threshold), ap)

    ml_names = [n for j, n in enumerate(label_names) if j != normal_index and n not in skipped]
    ml_map = _mean([per_label[n].ap for n in ml_names])
    ml_auc = _mean([per_label[n].auc for n in ml_names])
    ml_f1 = _mean([per_label[n].f1 for n in ml_names])
    normal = per_label[label_names[normal_index]]
    bin_auc = normal.auc if normal.auc is not None else math.nan
    ml, model = composite_scores(ml_map, ml_auc, bin_auc)
    return MetricsReport(per_label, ml_map, ml_f1, ml_auc, bin_auc, normal.f1, ml, model, skipped)
