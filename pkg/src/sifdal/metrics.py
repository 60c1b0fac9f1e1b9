"""COCO-style detection metrics over per-image box lists."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DataError

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
AREA_BUCKETS = {"s": (0.0, 32.0 ** 2), "m": (32.0 ** 2, 96.0 ** 2), "l": (96.0 ** 2, np.inf)}


def iou(a, b) -> float:
    for box in (a, b):
        if not (box[2] > box[0] and box[3] > box[1]):
            raise ContractError(f"degenerate box {tuple(box)}")
    return float(kernels.iou_matrix(np.asarray(a[:4])[None], np.asarray(b[:4])[None])[0, 0])


def _area(boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def pr_curve_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from a ranked true-positive indicator."""
    if n_gt == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    vals = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return float(vals.mean())


def _rank(preds_per_image):
    """Global ranking (image, index) by descending score, ties by box coordinates then image."""
    keys = []
    for img, p in enumerate(preds_per_image):
        for j, row in enumerate(p):
            keys.append((-float(row[4]), float(row[0]), float(row[1]), float(row[2]), float(row[3]), img, j))
    keys.sort()
    return [(k[5], k[6]) for k in keys]


def match_predictions(preds_per_image, gts_per_image, iou_thresh: float, area_range=None):
    """Greedy matching in score order.

    Returns ``(tp, n_gt)`` where ``tp`` holds 1/0 per counted prediction in rank
    order.  With ``area_range``, out-of-range GTs are ignored: predictions
    matching them, and unmatched out-of-range predictions, are not counted.
    """
    ious, ignore, used = [], [], []
    n_gt = 0
    for p, g in zip(preds_per_image, gts_per_image):
        g = np.asarray(g, dtype=np.float64).reshape(-1, 4)
        p = np.asarray(p, dtype=np.float64).reshape(-1, 5)
        ious.append(kernels.iou_matrix(p[:, :4], g) if len(p) and len(g) else np.zeros((len(p), len(g))))
        if area_range is None:
            ig = np.zeros(len(g), dtype=bool)
        else:
            a = _area(g)
            ig = (a < area_range[0]) | (a >= area_range[1])
        ignore.append(ig)
        used.append(np.zeros(len(g), dtype=bool))
        n_gt += int((~ig).sum())

    tp = []
    for img, j in _rank(preds_per_image):
        row = ious[img][j]
        best, best_ignored = -1, False
        for want_ignored in (False, True):
            cand = np.flatnonzero((~used[img]) & (ignore[img] == want_ignored) & (row >= iou_thresh))
            if cand.size:
                # highest IoU, first listed GT on ties
                best = int(cand[np.argmax(row[cand])])
                best_ignored = want_ignored
                break
        if best >= 0:
            used[img][best] = True
            if not best_ignored:
                tp.append(1.0)
            continue
        if area_range is not None:
            a = _area(np.asarray(preds_per_image[img][j][:4]))[0]
            if a < area_range[0] or a >= area_range[1]:
                continue
        tp.append(0.0)
    return np.asarray(tp), n_gt


def average_precision(preds, gts, iou_thresh: float) -> float:
    """AP for one image and one class; ``preds`` rows are ``(x0, y0, x1, y1, score)``."""
    return dataset_average_precision([preds], [gts], iou_thresh)


def dataset_average_precision(preds_per_image, gts_per_image, iou_thresh, area_range=None) -> float:
    tp, n_gt = match_predictions(preds_per_image, gts_per_image, iou_thresh, area_range)
    return pr_curve_ap(tp, n_gt)


@dataclass
class EvalReport:
    map: float
    ap50: float
    ap75: float
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None
    per_class: dict = field(default_factory=dict)
    rho_sq_holdout: float | None = None
    height_acc: float | None = None
    rel_zeroing_delta: float | None = None

    def to_dict(self):
        return asdict(self)


def _split_by_class(dets_per_image, gts_per_image, n_classes):
    """dets rows (x0,y0,x1,y1,score,cls); gts rows (x0,y0,x1,y1,cls)."""
    preds = [[[] for _ in dets_per_image] for _ in range(n_classes)]
    gts = [[[] for _ in gts_per_image] for _ in range(n_classes)]
    for i, dets in enumerate(dets_per_image):
        for d in dets:
            c = int(d[5])
            if not 0 <= c < n_classes:
                raise DataError(f"unknown class id {c} in predictions")
            preds[c][i].append(tuple(d[:5]))
    for i, boxes in enumerate(gts_per_image):
        for b in boxes:
            c = int(b[4])
            if not 0 <= c < n_classes:
                raise DataError(f"unknown class id {c} in ground truth")
            gts[c][i].append(tuple(b[:4]))
    return preds, gts


def map_suite(dets_per_image: Sequence, gts_per_image: Sequence, n_classes: int,
              class_names: Sequence[str] | None = None) -> EvalReport:
    """mAP over [0.50:0.05:0.95], AP50, AP75 and size-bucketed mAP.

    Classes without ground truth in the whole set are left out of every mean,
    as is any size bucket without ground truth (reported as ``None``).
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ContractError("need one prediction list per ground-truth image")
    preds, gts = _split_by_class(dets_per_image, gts_per_image, n_classes)
    names = list(class_names) if class_names else [str(c) for c in range(n_classes)]
    present = [c for c in range(n_classes) if any(len(g) for g in gts[c])]
    if not present:
        return EvalReport(0.0, 0.0, 0.0, None, None, None, {})

    table = np.zeros((n_classes, len(IOU_THRESHOLDS)))
    for c in present:
        for t, thr in enumerate(IOU_THRESHOLDS):
            table[c, t] = dataset_average_precision(preds[c], gts[c], thr)
    per = table[present]
    buckets = {}
    for name, rng in AREA_BUCKETS.items():
        vals = []
        for c in present:
            n_in = sum(int(np.sum((_area(g) >= rng[0]) & (_area(g) < rng[1]))) for g in gts[c] if len(g))
            if n_in == 0:
                continue
            vals.append(np.mean([dataset_average_precision(preds[c], gts[c], thr, rng) for thr in IOU_THRESHOLDS]))
        buckets[name] = float(np.mean(vals)) if vals else None
    i50 = IOU_THRESHOLDS.index(0.5)
    i75 = IOU_THRESHOLDS.index(0.75)
    per_class = {names[c]: {"map": float(table[c].mean()), "ap50": float(table[c, i50]),
                            "ap75": float(table[c, i75])} for c in present}
    return EvalReport(float(per.mean()), float(per[:, i50].mean()), float(per[:, i75].mean()),
                      buckets["s"], buckets["m"], buckets["l"], per_class)


def per_class_csv(report: EvalReport) -> str:
    lines = ["class,map,ap50,ap75"]
    for name, row in report.per_class.items():
        lines.append(f"{name},{row['map']:.17g},{row['ap50']:.17g},{row['ap75']:.17g}")
    return "\n".join(lines) + "\n"
