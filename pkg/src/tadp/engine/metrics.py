"""Segmentation, depth and detection metrics plus the serialised MetricReport."""
from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

IGNORE_INDEX = 255

SEG_KEYS = ("mIoU_ss", "mIoU_ms")
DEPTH_KEYS = ("RMSE", "δ1", "δ2", "δ3", "REL", "log10")
DET_KEYS = ("AP", "AP50")


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


# segmentation


class ConfusionMatrix:
    """gt x pred pixel counts; accumulation is order independent."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.mat = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = _np(pred), _np(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
        keep = gt != self.ignore_index
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        K = self.num_classes
        if g.size and (g.min() < 0 or g.max() >= K or p.min() < 0 or p.max() >= K):
            raise ValueError(f"labels outside [0, {K})")
        self.mat += np.bincount(g * K + p, minlength=K * K).reshape(K, K)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.mat = self.mat + other.mat
        return out

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from the ground truth."""
        tp = np.diag(self.mat).astype(np.float64)
        gt_count = self.mat.sum(1)
        denom = gt_count + self.mat.sum(0) - tp
        out = np.full(self.num_classes, np.nan)
        present = gt_count > 0
        out[present] = tp[present] / denom[present]
        return out

    def miou(self) -> float:
        iou = self.iou()
        return float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")


def miou(preds, gts, num_classes: int, ignore_index: int = IGNORE_INDEX) -> tuple[float, np.ndarray]:
    """Dataset mIoU over classes present in ``gts``. Accepts one array or a sequence of arrays."""
    cm = ConfusionMatrix(num_classes, ignore_index)
    if isinstance(preds, (np.ndarray, torch.Tensor)) and isinstance(gts, (np.ndarray, torch.Tensor)):
        cm.update(preds, gts)
    else:
        preds, gts = list(preds), list(gts)
        if len(preds) != len(gts):
            raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
        for p, g in zip(preds, gts):
            cm.update(p, g)
    return cm.miou(), cm.iou()


def multiscale_probs(
    predict: Callable[[torch.Tensor], torch.Tensor],
    image: torch.Tensor,
    scales: Sequence[float] = (0.75, 1.0, 1.25),
    flip: bool = True,
    size_multiple: int = 8,
) -> torch.Tensor:
    """Softmax scores averaged over rescaled (and flipped) copies, at the input resolution.

    ``predict`` maps a (B, 3, h, w) image to (B, K, h, w) logits. Rescaled
    sizes are rounded to ``size_multiple`` so the encoder accepts them.
    """
    H, W = image.shape[-2:]
    acc = None
    n = 0
    for s in scales:
        h = max(size_multiple, int(round(H * s / size_multiple)) * size_multiple)
        w = max(size_multiple, int(round(W * s / size_multiple)) * size_multiple)
        x = image if (h, w) == (H, W) else F.interpolate(image, size=(h, w), mode="bilinear", align_corners=False)
        variants = [(x, False)] + ([(x.flip(-1), True)] if flip else [])
        for xi, flipped in variants:
            logits = predict(xi)
            if flipped:
                logits = logits.flip(-1)
            if logits.shape[-2:] != (H, W):
                logits = F.interpolate(logits, size=(H, W), mode="bilinear", align_corners=False)
            p = logits.softmax(1)
            acc = p if acc is None else acc + p
            n += 1
    return acc / n


# depth


class DepthAccumulator:
    """Pixel-pooled depth metrics over a dataset."""

    def __init__(self):
        self.n = 0
        self.sq = 0.0
        self.rel = 0.0
        self.log10 = 0.0
        self.delta = [0, 0, 0]

    def update(self, pred, gt, valid=None) -> "DepthAccumulator":
        pred, gt = _np(pred).astype(np.float64), _np(gt).astype(np.float64)
        if pred.shape != gt.shape:
            raise ValueError(f"pred {pred.shape} and gt {gt.shape} differ")
        mask = (gt > 0) & np.isfinite(gt)
        if valid is not None:
            mask &= _np(valid).astype(bool)
        p, g = pred[mask], gt[mask]
        if np.any(p <= 0):
            raise ValueError("depth predictions must be positive")
        ratio = np.maximum(p / g, g / p)
        self.n += p.size
        self.sq += float(np.sum((p - g) ** 2))
        self.rel += float(np.sum(np.abs(p - g) / g))
        self.log10 += float(np.sum(np.abs(np.log10(p) - np.log10(g))))
        for i in range(3):
            self.delta[i] += int(np.sum(ratio < 1.25 ** (i + 1)))
        return self

    def result(self) -> dict[str, float]:
        if self.n == 0:
            raise ValueError("depth metrics over an empty valid mask")
        n = self.n
        return {
            "RMSE": math.sqrt(self.sq / n),
            "δ1": self.delta[0] / n,
            "δ2": self.delta[1] / n,
            "δ3": self.delta[2] / n,
            "REL": self.rel / n,
            "log10": self.log10 / n,
        }


def depth_metrics(pred, gt, valid_mask=None) -> dict[str, float]:
    return DepthAccumulator().update(pred, gt, valid_mask).result()


# detection

AP_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, np.float64).reshape(-1, 4), np.asarray(b, np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolated area under the PR curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _class_ap(preds, gts, cls: int, thr: float) -> float | None:
    gt_boxes = {i: np.asarray(g["boxes"], np.float64).reshape(-1, 4)[np.asarray(g["labels"]) == cls] for i, g in enumerate(gts)}
    n_gt = sum(len(b) for b in gt_boxes.values())
    if n_gt == 0:
        return None
    dets = []
    for i, p in enumerate(preds):
        labels = np.asarray(p["labels"])
        boxes = np.asarray(p["boxes"], np.float64).reshape(-1, 4)
        scores = np.asarray(p["scores"], np.float64)
        for j in np.nonzero(labels == cls)[0]:
            dets.append((-scores[j], i, j, boxes[j]))
    dets.sort(key=lambda d: (d[0], d[1], d[2]))
    taken = {i: np.zeros(len(b), bool) for i, b in gt_boxes.items()}
    tp = np.zeros(len(dets))
    for k, (_, i, _, box) in enumerate(dets):
        g = gt_boxes[i]
        if len(g) == 0:
            continue
        ious = box_iou(box, g)[0]
        best = int(np.argmax(ious))
        # VOC rule: a detection whose best gt is already taken is a false positive
        if ious[best] >= thr and not taken[i][best]:
            taken[i][best] = True
            tp[k] = 1
    if not dets:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(dets) + 1)
    return average_precision(recall, precision)


def detection_ap(preds: Sequence[dict], gts: Sequence[dict], iou_thresholds: Iterable[float] = AP_THRESHOLDS) -> dict:
    """VOC-style AP averaged over ``iou_thresholds`` and AP at 0.50.

    preds: per image {"boxes", "labels", "scores"}; gts: per image {"boxes", "labels"}.
    Classes without ground truth are skipped.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} images")
    classes = sorted({int(c) for g in gts for c in np.asarray(g["labels"]).reshape(-1)})

    def mean_ap(thr: float) -> tuple[float, dict[int, float]]:
        aps = {c: _class_ap(preds, gts, c, thr) for c in classes}
        aps = {c: a for c, a in aps.items() if a is not None}
        return (float(np.mean(list(aps.values()))) if aps else 0.0), aps

    sweep = [mean_ap(float(t))[0] for t in iou_thresholds]
    ap50, per_class = mean_ap(0.5)
    return {"AP": float(np.mean(sweep)) if sweep else 0.0, "AP50": ap50, "per_class_AP50": per_class}


# report


@dataclass
class MetricReport:
    task: str
    metrics: dict[str, float]
    per_class: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.metrics.items():
            if v is None or (isinstance(v, float) and math.isnan(v)):
                continue
            if k in ("mIoU_ss", "mIoU_ms", "δ1", "δ2", "δ3", "AP", "AP50") and not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")
            if k in ("RMSE", "REL", "log10") and v < 0:
                raise ValueError(f"{k}={v} is negative")

    def to_dict(self) -> dict:
        return {"task": self.task, **self.metrics, "per_class": self.per_class, "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        task = d.pop("task")
        per_class = d.pop("per_class", {})
        meta = d.pop("meta", {})
        return cls(task, d, per_class, meta)
