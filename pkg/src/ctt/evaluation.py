"""Segmentation metrics, pseudo-label diagnostics and feature export."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import IGNORE, Sample
from .errors import ShapeError, UndefinedMetricError
from .model import forward, upsample_probs


class ConfusionMatrix:
    """Rows are ground truth, columns are predictions; IGNORE pixels are skipped."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(np.int64)
    gt = np.asarray(gt).astype(np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    valid = gt != IGNORE
    n = cm.num_classes
    idx = n * gt[valid] + pred[valid]
    counts = np.bincount(idx, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(n, cm.counts + counts)


def miou(cm: ConfusionMatrix):
    """Per-class IoU (nan where undefined) and the mean over defined classes."""
    if cm.total == 0:
        raise UndefinedMetricError("mIoU of an empty confusion matrix")
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(0) + cm.counts.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
    return iou, float(np.nanmean(iou))


def pseudo_label_quality(pseudo, gt) -> float:
    """Fraction of non-IGNORE pixels where the pseudo-label equals ground truth.

    ``pseudo`` may be an integer map or a one-hot map with a trailing class axis.
    """
    pseudo = torch.as_tensor(pseudo)
    gt = torch.as_tensor(gt).long()
    if pseudo.ndim == gt.ndim + 1:
        pseudo = pseudo.argmax(-1)
    valid = gt != IGNORE
    n = int(valid.sum())
    if n == 0:
        return float("nan")
    return float(((pseudo.long() == gt) & valid).sum()) / n


def batch_images(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]))


@torch.no_grad()
def predict_probs(models, images: torch.Tensor) -> torch.Tensor:
    """Full-resolution probabilities, averaged over ``models`` when several are given."""
    probs = None
    for m in models:
        p = upsample_probs(forward(m, images).probs, images.shape[1:3])
        probs = p if probs is None else probs + p
    return probs / len(models)


def evaluate(models, samples: Sequence[Sample], num_classes: int, batch_size=16) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        pred = predict_probs(models, batch_images(chunk)).argmax(-1).numpy()
        cm = accumulate(cm, pred, np.stack([s.label for s in chunk]))
    return cm


def format_report(cm: ConfusionMatrix) -> str:
    iou, mean = miou(cm)
    lines = ["class\tiou\tgt_pixels\tpred_pixels"]
    gt_pixels, pred_pixels = cm.counts.sum(1), cm.counts.sum(0)
    for c in range(cm.num_classes):
        value = "nan" if np.isnan(iou[c]) else f"{iou[c]:.6f}"
        lines.append(f"{c}\t{value}\t{gt_pixels[c]}\t{pred_pixels[c]}")
    lines.append(f"mean\t{mean:.6f}\t{cm.total}\t{cm.total}")
    return "\n".join(lines) + "\n"


@torch.no_grad()
def export_features(model, samples, origins, path, per_class_cap=100, seed=0) -> int:
    """Write feature vectors tagged by class and origin as a tab-separated table.

    The class tag of a feature is the model's own argmax at that pixel (the
    same rule the contrastive losses use). At most ``per_class_cap`` rows are
    kept for every (class, origin) combination, drawn with a seeded rng.
    Returns the number of rows written.
    """
    if len(samples) != len(origins):
        raise ShapeError("samples and origins must have equal length")
    groups: dict = {}
    for sample, origin in zip(samples, origins):
        out = forward(model, batch_images([sample]))
        feats = out.features[0].reshape(-1, out.features.shape[-1]).numpy()
        cls = out.hard_labels[0].reshape(-1).numpy()
        for c in np.unique(cls):
            groups.setdefault((int(c), str(origin)), []).append(feats[cls == c])
    rng = np.random.default_rng(seed)
    d = model.cfg.feature_dim
    rows = ["class\torigin\t" + "\t".join(f"f{i}" for i in range(d))]
    for (c, origin) in sorted(groups):
        block = np.concatenate(groups[(c, origin)])
        if len(block) > per_class_cap:
            block = block[np.sort(rng.choice(len(block), per_class_cap, replace=False))]
        for vec in block:
            rows.append(f"{c}\t{origin}\t" + "\t".join(f"{v:.6g}" for v in vec))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(rows) + "\n")
    return len(rows) - 1
