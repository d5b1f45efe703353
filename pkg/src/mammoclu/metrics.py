"""Composite training loss and screening metrics (AUC, ACC, F1, MDR)."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata

from .data_io import ValidationError

PROB_CLAMP = 1e-7


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 0.1

    def __post_init__(self):
        ws = (self.alpha, self.beta, self.gamma, self.delta)
        if min(ws) < 0:
            raise ValidationError(f"loss weights must be non-negative, got {ws}")
        if max(ws) == 0:
            raise ValidationError("at least one loss weight must be positive")


def bce_with_logits(z: torch.Tensor, y: torch.Tensor, pos_weight: float | None = None) -> torch.Tensor:
    """Elementwise stable BCE: max(z, 0) - z*y + log(1 + exp(-|z|))."""
    if pos_weight is None:
        return torch.clamp(z, min=0) - z * y + torch.log1p(torch.exp(-z.abs()))
    pw = torch.as_tensor(pos_weight, dtype=z.dtype)
    return F.binary_cross_entropy_with_logits(z, y, pos_weight=pw, reduction="none")


def bce_prob(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p))


def composite_loss(outputs, labels, w: LossWeights = LossWeights(), pos_weight: float | None = None):
    """Return (total, breakdown) averaged over the batch.

    ``outputs`` needs global_prob, local_logit, fusion_logit (shape (B,)) and
    saliency (B, 4, h, w); the map term is the mean absolute saliency over all views.
    """
    labels = torch.as_tensor(labels)
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise ValidationError(f"labels must be 0 or 1, got {labels.tolist()}")
    gp = torch.as_tensor(outputs.global_prob)
    y = labels.to(gp.dtype).reshape(gp.shape)
    terms = {
        "global": bce_prob(gp, y).mean(),
        "local": bce_with_logits(torch.as_tensor(outputs.local_logit), y, pos_weight).mean(),
        "fusion": bce_with_logits(torch.as_tensor(outputs.fusion_logit), y, pos_weight).mean(),
        "map": torch.as_tensor(outputs.saliency).abs().mean(),
    }
    total = w.alpha * terms["global"] + w.beta * terms["local"] + w.gamma * terms["fusion"] + w.delta * terms["map"]
    return total, terms


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be 1-D and equally long")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    return scores, labels.astype(int)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half, via midranks."""
    scores, labels = _check_binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels) -> list[tuple[float, float, float]]:
    """(fpr, tpr, threshold) vertices for descending thresholds; first vertex is (0, 0, inf)."""
    scores, labels = _check_binary(scores, labels)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs at least one positive and one negative label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    pts = [(0.0, 0.0, float("inf"))]
    pts += [(fps[i] / n_neg, tps[i] / n_pos, float(s[i])) for i in last]
    return pts


def write_roc_csv(points, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, thr in points:
            writer.writerow([repr(float(fpr)), repr(float(tpr)), repr(float(thr))])


def confusion(scores, labels, threshold: float = 0.5):
    """Return (tp, tn, fp, fn, acc); a score equal to the threshold is positive."""
    scores, labels = _check_binary(scores, labels)
    if scores.size == 0:
        raise ValidationError("confusion needs at least one score")
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return tp, tn, fp, fn, (tp + tn) / (tp + tn + fp + fn)


def f1(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn <= 0:
        raise ValidationError("F1 undefined with no positives predicted or present")
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def overlap_fraction(lesion, patch) -> float:
    """Intersection area over lesion area for (x_min, y_min, x_max, y_max) boxes."""
    lx0, ly0, lx1, ly1 = lesion
    px0, py0, px1, py1 = patch
    iw = max(0.0, min(lx1, px1) - max(lx0, px0))
    ih = max(0.0, min(ly1, py1) - max(ly0, py0))
    return iw * ih / ((lx1 - lx0) * (ly1 - ly0))


def missed_detections(patch_boxes, lesion_boxes, tau: float = 0.25) -> tuple[int, int]:
    """Return (n_miss, n_gt) for parallel lists over (study, view) of box lists."""
    n_gt = n_miss = 0
    for patches, lesions in zip(patch_boxes, lesion_boxes):
        for les in lesions:
            n_gt += 1
            if not any(overlap_fraction(les, p) >= tau for p in patches):
                n_miss += 1
    return n_miss, n_gt


def mdr(patch_boxes, lesion_boxes, tau: float = 0.25) -> float:
    """Missed detection rate N_miss / N_gt."""
    n_miss, n_gt = missed_detections(patch_boxes, lesion_boxes, tau)
    if n_gt == 0:
        raise ValidationError("MDR undefined: no ground-truth lesion boxes")
    return n_miss / n_gt


@dataclass
class MetricsReport:
    auc: float | None
    acc: float
    f1: float
    tp: int
    tn: int
    fp: int
    fn: int
    threshold: float
    n_gt: int = 0
    n_miss: int = 0
    mdr: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.n_gt == 0:
            d.pop("mdr")
        return d


def metrics_report(scores, labels, threshold: float = 0.5, patch_boxes=None, lesion_boxes=None,
                   tau: float = 0.25) -> MetricsReport:
    tp, tn, fp, fn, acc = confusion(scores, labels, threshold)
    labels = np.asarray(labels)
    auc_v = auc(scores, labels) if 0 < labels.sum() < labels.size else None
    f1_v = f1(tp, fp, fn) if tp + fp + fn > 0 else 0.0
    rep = MetricsReport(auc_v, acc, f1_v, tp, tn, fp, fn, float(threshold))
    if lesion_boxes is not None:
        rep.n_miss, rep.n_gt = missed_detections(patch_boxes, lesion_boxes, tau)
        if rep.n_gt:
            rep.mdr = rep.n_miss / rep.n_gt
    return rep
