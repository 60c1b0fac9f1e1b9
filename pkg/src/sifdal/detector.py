"""A small anchor-free detector on a three-level feature pyramid.

Backbone: a stride-2 stem and four stride-2 stages give C3/C4/C5 at strides
8/16/32.  The top-down pathway adds upsampled coarser levels to 1x1 laterals.
Each level feeds a per-cell head predicting objectness, class logits and box
offsets ``(dx, dy, log w, log h)`` in cell units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels, ops
from .errors import ConfigurationError, DataError
from .tape import Node, Tape

LEVELS = ("p3", "p4", "p5")
STRIDES = {"p3": 8, "p4": 16, "p5": 32}
# sqrt(area) upper bounds for level assignment, matching the small/medium metric buckets
LEVEL_LIMITS = (32.0, 96.0)


@dataclass
class PyramidFeatures:
    p3: Node
    p4: Node
    p5: Node

    def __getitem__(self, level):
        return getattr(self, level)


@dataclass
class GridPrediction:
    """Head outputs for one pyramid level, batched ``(N, ., h, w)``."""
    objectness: Node
    class_logits: Node
    box: Node
    stride: int


@dataclass(frozen=True)
class DetectionBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int
    score: float

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def backbone_channels(width: int) -> tuple[int, int]:
    """(stem channels, stage channels) for a P3 half-width ``width``."""
    return width, 2 * width


def init_backbone(rng: np.random.Generator, width: int, fpn_channels: int, c_in: int = 3) -> dict:
    stem, stage = backbone_channels(width)
    params = {}

    def conv(name, co, ci):
        params[f"det.{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * ci)), size=(co, ci, 3, 3))
        params[f"det.{name}.b"] = np.zeros(co)

    conv("stem", stem, c_in)
    conv("c2", stage, stem)
    conv("c3", stage, stage)
    conv("c4", stage, stage)
    conv("c5", stage, stage)
    return params


def init_fpn(rng, width: int, fpn_channels: int, td4_in: int, td3_in: int) -> dict:
    _, stage = backbone_channels(width)
    lin = lambda co, ci: rng.normal(0.0, np.sqrt(1.0 / ci), size=(co, ci))  # noqa: E731
    return {
        "det.lat5.w": lin(fpn_channels, stage),
        "det.lat4.w": lin(fpn_channels, stage),
        "det.lat3.w": lin(2 * width, stage),
        "det.td4.w": lin(fpn_channels, td4_in),
        "det.td3.w": lin(2 * width, td3_in),
    }


def init_head(rng, level: str, c_in: int, n_classes: int, prior: float = 0.01) -> dict:
    p = f"det.head.{level}"
    std = np.sqrt(1.0 / c_in)
    return {
        f"{p}.obj.w": rng.normal(0.0, 0.1 * std, size=(1, c_in)),
        f"{p}.obj.b": np.full(1, np.log(prior / (1.0 - prior))),
        f"{p}.cls.w": rng.normal(0.0, 0.1 * std, size=(n_classes, c_in)),
        f"{p}.cls.b": np.zeros(n_classes),
        f"{p}.box.w": rng.normal(0.0, 0.1 * std, size=(4, c_in)),
        f"{p}.box.b": np.array([0.5, 0.5, 0.0, 0.0]),
    }


def _conv_block(tape, x, name, stride=2):
    y = ops.conv2d(x, tape.param(f"det.{name}.w"), stride)
    return ops.relu(ops.add_channel_bias(y, tape.param(f"det.{name}.b")))


def fpn_forward(tape: Tape, images, topdown: Callable[[str, Node], Node] | None = None) -> PyramidFeatures:
    """Backbone + top-down pyramid for ``(N, 3, H, W)`` or ``(3, H, W)`` images.

    ``topdown(level, p)`` picks which part of a coarser level is passed down
    into the finer one; by default the whole map is.
    """
    x = images if isinstance(images, Node) else tape.const(images)
    h, w = x.shape[-2:]
    if h % 32 or w % 32:
        raise ConfigurationError(f"image size must be divisible by 32, got {h}x{w}")
    route = topdown or (lambda level, p: p)
    y = _conv_block(tape, x, "stem")
    y = _conv_block(tape, y, "c2")
    c3 = _conv_block(tape, y, "c3")
    c4 = _conv_block(tape, c3, "c4")
    c5 = _conv_block(tape, c4, "c5")
    p5 = ops.conv1x1(c5, tape.param("det.lat5.w"))
    p4 = ops.conv1x1(c4, tape.param("det.lat4.w")) + ops.conv1x1(ops.upsample2(route("p5", p5)),
                                                                  tape.param("det.td4.w"))
    p3 = ops.conv1x1(c3, tape.param("det.lat3.w")) + ops.conv1x1(ops.upsample2(route("p4", p4)),
                                                                  tape.param("det.td3.w"))
    return PyramidFeatures(p3, p4, p5)


def head_forward(tape: Tape, x: Node, level: str) -> GridPrediction:
    p = f"det.head.{level}"
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)

    def lin(part):
        return ops.add_channel_bias(ops.conv1x1(x, tape.param(f"{p}.{part}.w")), tape.param(f"{p}.{part}.b"))

    return GridPrediction(lin("obj"), lin("cls"), lin("box"), STRIDES[level])


def assign_level(box) -> str:
    side = np.sqrt((box[2] - box[0]) * (box[3] - box[1]))
    if side <= LEVEL_LIMITS[0]:
        return "p3"
    if side <= LEVEL_LIMITS[1]:
        return "p4"
    return "p5"


@dataclass
class LevelTargets:
    objectness: np.ndarray  # (N,1,h,w) 0/1
    class_onehot: np.ndarray  # (N,K,h,w), zero off positive cells
    box: np.ndarray  # (N,4,h,w)


def encode_targets(gts: Sequence[Sequence], image_size: tuple[int, int], n_classes: int) -> dict[str, LevelTargets]:
    """Per-level regression targets for a batch.

    ``gts[i]`` is a sequence of ``(x0, y0, x1, y1, class_id)`` for image i.
    When two boxes land in the same cell the first one listed wins.
    """
    height, width = image_size
    n = len(gts)
    out = {}
    for level in LEVELS:
        s = STRIDES[level]
        gh, gw = height // s, width // s
        out[level] = LevelTargets(np.zeros((n, 1, gh, gw)), np.zeros((n, n_classes, gh, gw)),
                                  np.zeros((n, 4, gh, gw)))
    for i, boxes in enumerate(gts):
        for box in boxes:
            x0, y0, x1, y1, cls = box[:5]
            cls = int(cls)
            if not 0 <= cls < n_classes:
                raise DataError(f"class id {cls} outside [0, {n_classes})")
            level = assign_level(box)
            s = STRIDES[level]
            t = out[level]
            gh, gw = t.objectness.shape[2:]
            cx, cy = 0.5 * (x0 + x1) / s, 0.5 * (y0 + y1) / s
            col = min(int(np.floor(cx)), gw - 1)
            row = min(int(np.floor(cy)), gh - 1)
            if t.objectness[i, 0, row, col]:
                continue
            t.objectness[i, 0, row, col] = 1.0
            t.class_onehot[i, cls, row, col] = 1.0
            t.box[i, :, row, col] = (cx - col, cy - row, np.log((x1 - x0) / s), np.log((y1 - y0) / s))
    return out


def detection_loss(preds: dict[str, GridPrediction], targets: dict[str, LevelTargets]) -> Node:
    """BCE on every cell's objectness, class CE and squared box error on positives; mean per image."""
    total = None
    n = None
    for level, pred in preds.items():
        t = targets[level]
        z = pred.objectness
        n = z.shape[0]
        bce = ops.sum(ops.softplus(z) - z * t.objectness)
        ce = ops.neg(ops.sum(ops.log_softmax(pred.class_logits, axis=1) * t.class_onehot))
        l2 = ops.sum(ops.square(pred.box - t.box) * t.objectness)
        part = bce + ce + l2
        total = part if total is None else total + part
    return total / float(n)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def decode_level(obj, cls_logits, box, stride):
    """Dense decode of one image's level arrays ``(1,h,w)``, ``(K,h,w)``, ``(4,h,w)``.

    Returns (boxes (M,4), scores (M,), classes (M,), rows, cols) in row-major cell order.
    """
    _, gh, gw = obj.shape
    probs = _softmax(cls_logits, axis=0)
    cls = probs.argmax(axis=0)
    score = _sigmoid(obj[0]) * probs.max(axis=0)
    rows, cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    cx = (cols + box[0]) * stride
    cy = (rows + box[1]) * stride
    bw = np.exp(box[2]) * stride
    bh = np.exp(box[3]) * stride
    boxes = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1)
    return boxes.reshape(-1, 4), score.ravel(), cls.ravel(), rows.ravel(), cols.ravel()


def nms_order(scores, levels, rows, cols):
    """Descending score, ties by (level, row, column)."""
    return np.lexsort((cols, rows, levels, -np.asarray(scores)))


def per_class_nms(boxes, scores, classes, levels, rows, cols, nms_iou: float) -> np.ndarray:
    """Indices surviving greedy NMS within each class, in output order."""
    scores, classes = np.asarray(scores), np.asarray(classes)
    order = nms_order(scores, levels, rows, cols)
    kept = []
    for k in np.unique(classes):
        members = order[classes[order] == k]
        kept.extend(members[kernels.greedy_nms(np.asarray(boxes)[members], nms_iou)])
    kept = np.asarray(kept, dtype=np.int64)
    if not kept.size:
        return kept
    return kept[nms_order(scores[kept], np.asarray(levels)[kept], np.asarray(rows)[kept], np.asarray(cols)[kept])]


def decode_detections(level_arrays: dict[str, tuple], score_thresh: float, nms_iou: float,
                      image_size: tuple[int, int]) -> list[DetectionBox]:
    """Score, threshold and per-class NMS one image's head outputs.

    ``level_arrays[level] = (obj (1,h,w), cls (K,h,w), box (4,h,w))`` as numpy arrays.
    """
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise ConfigurationError("score_thresh and nms_iou must lie in [0, 1]")
    height, width = image_size
    all_boxes, all_scores, all_cls, all_lvl, all_r, all_c = [], [], [], [], [], []
    for li, level in enumerate(LEVELS):
        if level not in level_arrays:
            continue
        obj, cls_logits, box = level_arrays[level]
        b, s, c, r, col = decode_level(obj, cls_logits, box, STRIDES[level])
        all_boxes.append(b)
        all_scores.append(s)
        all_cls.append(c)
        all_lvl.append(np.full(s.shape, li))
        all_r.append(r)
        all_c.append(col)
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    classes = np.concatenate(all_cls)
    lvls, rows, cols = np.concatenate(all_lvl), np.concatenate(all_r), np.concatenate(all_c)

    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, width)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, height)
    ok = (scores >= score_thresh) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    idx = np.flatnonzero(ok)
    keep = per_class_nms(boxes[idx], scores[idx], classes[idx], lvls[idx], rows[idx], cols[idx], nms_iou)
    kept = idx[keep]
    return [DetectionBox(*map(float, boxes[i]), int(classes[i]), float(scores[i])) for i in kept]
