"""Per-class average precision and mAP over cell classifications."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class EvalMetrics:
    map_percent: float
    per_class_ap: np.ndarray  # NaN for classes without positives
    excluded: list[int] = field(default_factory=list)


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """All-point interpolated area under the precision-recall curve.

    Items are ranked by descending score; ties keep input order.
    """
    scores = np.asarray(scores, np.float64).ravel()
    positives = np.asarray(positives, bool).ravel()
    npos = int(positives.sum())
    if npos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(envelope[hits].sum() / npos)


def mean_average_precision(preds: Sequence, truths: Sequence, classes: int | None = None) -> EvalMetrics:
    """``preds``: TaskPrediction or (cells, C+1) arrays; ``truths``: SceneSample or label arrays.

    Every cell of every sample is ranked per class; classes with no
    ground-truth positive are excluded from the mean.
    """
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} ground truths")
    if not preds:
        raise ValueError("no samples to evaluate")
    scores = np.concatenate([np.asarray(getattr(p, "scores", p)) for p in preds], axis=0)
    labels = np.concatenate([np.asarray(getattr(t, "labels", t)).ravel() for t in truths])
    if scores.shape[0] != labels.size:
        raise ValueError("prediction cells do not align with ground-truth cells")
    classes = classes or scores.shape[1] - 1
    aps = np.full(classes, np.nan)
    excluded = []
    for c in range(1, classes + 1):
        pos = labels == c
        if not pos.any():
            excluded.append(c)
            continue
        aps[c - 1] = average_precision(scores[:, c], pos)
    if excluded:
        warnings.warn(f"classes without ground truth excluded from mAP: {excluded}", stacklevel=2)
    valid = aps[~np.isnan(aps)]
    m = float(100.0 * valid.mean()) if valid.size else float("nan")
    return EvalMetrics(map_percent=m, per_class_ap=aps, excluded=excluded)
