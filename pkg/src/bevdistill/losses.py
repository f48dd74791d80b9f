"""Segmentation and distillation objectives, plus confusion-matrix mIoU."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 2.0  # VPD
    beta2: float = 2.0  # LWD
    beta3: float = 1.0  # logit KD

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be a finite nonnegative number, got {v}")


def _valid_targets(targets, ignore_id):
    targets = np.asarray(targets, dtype=np.int64)
    valid = targets != ignore_id if ignore_id is not None else np.ones(len(targets), dtype=bool)
    return targets, valid


def weighted_ce(logits, targets, weights, ignore_id=None) -> Tensor:
    """Class-weighted cross entropy normalized by the sum of target weights."""
    logits = ag.as_tensor(logits)
    targets, valid = _valid_targets(targets, ignore_id)
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        raise ValueError("weighted_ce: every target is ignored")
    y = targets[rows]
    w = np.asarray(weights, dtype=np.float64)[y]
    if w.sum() <= 0:
        raise ValueError("weighted_ce: all target classes have zero weight")
    logp = ag.log_softmax_rows(logits[rows])
    picked = logp[np.arange(rows.size), y]
    return -ag.tsum(picked * w) * (1.0 / w.sum())


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Jaccard loss extension w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs, targets, ignore_id=None, num_classes=None) -> Tensor:
    """Mean over classes present in ``targets`` of the Lovász hinge on ``|fg - p_c|``."""
    probs = ag.as_tensor(probs)
    targets, valid = _valid_targets(targets, ignore_id)
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        raise ValueError("lovasz_softmax: every target is ignored")
    sums = probs.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("lovasz_softmax: probability rows must sum to 1")
    p = probs[rows]
    y = targets[rows]
    n_cls = probs.shape[1] if num_classes is None else num_classes
    losses = []
    for c in range(n_cls):
        fg = (y == c).astype(np.float64)
        if fg.sum() == 0:
            continue
        pc = p[:, c]
        # |fg - p| without a kink: p where fg == 0, 1 - p where fg == 1
        errors = pc * (1.0 - 2.0 * fg) + fg
        order = np.argsort(-errors.data, kind="stable")
        losses.append(ag.tsum(errors[order] * lovasz_grad(fg[order])))
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses))


def logit_kd(student_logits, teacher_logits, temperature: float = 2.0) -> Tensor:
    """T^2 * KL(softmax(t/T) || softmax(s/T)), averaged over rows; teacher detached."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    s = ag.as_tensor(student_logits)
    t = ag.as_tensor(teacher_logits).data
    if s.shape != t.shape:
        raise ValueError(f"logit shapes differ: {s.shape} vs {t.shape}")
    if s.shape[0] == 0:
        return Tensor(0.0)
    t_log = ag.log_softmax_rows(Tensor(t / temperature)).data
    t_prob = np.exp(t_log)
    s_log = ag.log_softmax_rows(s * (1.0 / temperature))
    kl_rows = ag.tsum((t_log - s_log) * t_prob, axis=1)
    return ag.mean(kl_rows) * (temperature * temperature)


def total_loss(wce, lovasz, l_vpd, l_lwd, l_logit, betas: LossWeights = LossWeights()) -> Tensor:
    return (
        ag.as_tensor(wce)
        + lovasz
        + ag.as_tensor(l_vpd) * betas.beta1
        + ag.as_tensor(l_lwd) * betas.beta2
        + ag.as_tensor(l_logit) * betas.beta3
    )


# ---------------------------------------------------------------- evaluation


def confusion_matrix(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate_confusion(cm: np.ndarray, predictions, targets, ignore_id=None) -> np.ndarray:
    """Rows are ground truth, columns predictions; ignored targets are skipped."""
    c = cm.shape[0]
    predictions = np.asarray(predictions, dtype=np.int64)
    targets, valid = _valid_targets(targets, ignore_id)
    pred = predictions[valid]
    if np.any((pred < 0) | (pred >= c)):
        raise ValueError(f"predictions must lie in 0..{c - 1}")
    gt = targets[valid]
    if np.any((gt < 0) | (gt >= c)):
        raise ValueError(f"targets must lie in 0..{c - 1} or be ignored")
    np.add.at(cm, (gt, pred), 1)
    return cm


def miou(cm: np.ndarray):
    """Per-class IoU (nan for classes absent from gt and prediction) and their mean."""
    cm = np.asarray(cm)
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(cm.shape[0], np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    return iou, float(iou[present].mean())


def write_iou_csv(path, iou, mean_iou, class_names=None) -> None:
    names = class_names or [f"class_{c}" for c in range(len(iou))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "iou"])
        for name, v in zip(names, iou):
            w.writerow([name, "" if np.isnan(v) else repr(float(v))])
        w.writerow(["mIoU", repr(float(mean_iou))])
