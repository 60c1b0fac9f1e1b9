"""Run a trained model over a held-out set and build an :class:`EvalReport`."""

from __future__ import annotations

import numpy as np

from .detector import LEVELS, decode_detections
from .errors import ContractError
from .metrics import EvalReport, map_suite
from .model import ModelConfig
from .synth import CLASSES, TrainingSet
from .tape import Tape
from .trainer import Batch, compute_losses

SCORE_THRESH = 0.05
NMS_IOU = 0.5
MAX_DETS = 100


def _batches(n, batch_size):
    return [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def frozen_tape(params) -> Tape:
    return Tape(params, {k: False for k in params})


def forward_batches(params, cfg: ModelConfig, data: TrainingSet, batch_size=16, zero_rel=False):
    """Per-batch (detections per image, rel logits or None, l_rho or None)."""
    out = []
    size = tuple(data.images.shape[-2:])
    for idx in _batches(len(data), batch_size):
        batch = Batch(data.images[idx], [data.boxes[i] for i in idx], data.levels[idx])
        tape = frozen_tape(params)
        model_out, _, _, l_rho = compute_losses(tape, batch, cfg, zero_rel=zero_rel)
        dets = []
        for i in range(len(idx)):
            arrays = {lv: (p.objectness.value[i], p.class_logits.value[i], p.box.value[i])
                      for lv, p in model_out.preds.items()}
            boxes = decode_detections(arrays, SCORE_THRESH, NMS_IOU, size)[:MAX_DETS]
            dets.append([(b.x_min, b.y_min, b.x_max, b.y_max, b.score, b.class_id) for b in boxes])
        first = next((lv for lv in LEVELS if lv in model_out.sifd), None)
        logits = model_out.sifd[first].rel_logits.value if first else None
        rho = float(l_rho.value) if (first and len(idx) >= 2) else None
        out.append((dets, logits, rho))
    return out


def detection_map(params, cfg, data, batch_size=16, zero_rel=False):
    runs = forward_batches(params, cfg, data, batch_size, zero_rel)
    dets = [d for r in runs for d in r[0]]
    return map_suite(dets, data.boxes, cfg.n_classes, CLASSES[:cfg.n_classes]), runs


def disentanglement_report(params, cfg: ModelConfig, data: TrainingSet, batch_size=16, runs=None,
                           base_map=None):
    """(rho_sq_holdout, height_acc, rel_zeroing_delta) on held-out batches."""
    n_batches = sum(1 for idx in _batches(len(data), batch_size) if len(idx) >= 2)
    if n_batches < 2:
        raise ContractError("held-out set must yield at least 2 batches of at least 2 samples")
    if not cfg.sifd_levels:
        return None, None, None
    if runs is None:
        rep, runs = detection_map(params, cfg, data, batch_size)
        base_map = rep.map
    # a short remainder batch has a much larger null rho^2 (about 1/(n-1)), so
    # only full batches count, as in training
    rhos = [r[2] for r in runs if r[2] is not None and len(r[0]) == batch_size]
    logits = np.concatenate([r[1] for r in runs])
    height_acc = float(np.mean(np.argmax(logits, axis=1) == data.levels))
    zeroed, _ = detection_map(params, cfg, data, batch_size, zero_rel=True)
    return float(np.mean(rhos)), height_acc, float(zeroed.map - base_map)


def evaluate(params, cfg: ModelConfig, data: TrainingSet, batch_size=16) -> EvalReport:
    report, runs = detection_map(params, cfg, data, batch_size)
    if cfg.sifd_levels:
        rho, acc, delta = disentanglement_report(params, cfg, data, batch_size, runs, report.map)
        report.rho_sq_holdout, report.height_acc, report.rel_zeroing_delta = rho, acc, delta
    return report
