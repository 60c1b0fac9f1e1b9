"""Pure-numpy implementations of the hot kernels.

Every function here has a twin in ``_numba_impl`` with an identical
signature; they agree to floating-point reassociation error only.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n, stride):
    return (n - 1) // stride + 1


def _windows(x, stride):
    # (N, C, Ho, Wo, 3, 3) view over the 1-padded input
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv3x3_forward(x, w, stride):
    win = _windows(x, stride)
    return np.ascontiguousarray(np.einsum("nchwij,ocij->nohw", win, w, optimize=True))


def conv3x3_backward_input(g, w, stride, height, width):
    n, _, ho, wo = g.shape
    cols = np.einsum("nohw,ocij->ncijhw", g, w, optimize=True)
    gxp = np.zeros((n, w.shape[1], height + 2, width + 2))
    for i in range(3):
        for j in range(3):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return gxp[:, :, 1:-1, 1:-1].copy()


def conv3x3_backward_weight(g, x, stride):
    win = _windows(x, stride)
    return np.einsum("nohw,nchwij->ocij", g, win, optimize=True)


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0.0, None) * np.clip(iy1 - iy0, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def greedy_nms(boxes, iou_thresh):
    """Indices kept by greedy suppression; ``boxes`` must already be in priority order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    ious = iou_matrix(boxes, boxes)
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thresh
    return np.asarray(keep, dtype=np.int64)
