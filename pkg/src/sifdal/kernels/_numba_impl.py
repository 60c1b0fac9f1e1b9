import numpy as np
from numba import njit

# fastmath stays off: training runs must be bitwise reproducible.
_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def _im2col(x, stride, ho, wo):
    # x: (C, H, W) -> (C*9, ho*wo), zero padding 1
    c_in, h, wd = x.shape
    cols = np.zeros((c_in * 9, ho * wo))
    for c in range(c_in):
        for ki in range(3):
            for kj in range(3):
                r = (c * 3 + ki) * 3 + kj
                for i in range(ho):
                    ii = i * stride + ki - 1
                    if ii < 0 or ii >= h:
                        continue
                    base = i * wo
                    for j in range(wo):
                        jj = j * stride + kj - 1
                        if jj >= 0 and jj < wd:
                            cols[r, base + j] = x[c, ii, jj]
    return cols


@njit(**_JIT)
def _col2im(cols, c_in, h, wd, stride, ho, wo):
    out = np.zeros((c_in, h, wd))
    for c in range(c_in):
        for ki in range(3):
            for kj in range(3):
                r = (c * 3 + ki) * 3 + kj
                for i in range(ho):
                    ii = i * stride + ki - 1
                    if ii < 0 or ii >= h:
                        continue
                    base = i * wo
                    for j in range(wo):
                        jj = j * stride + kj - 1
                        if jj >= 0 and jj < wd:
                            out[c, ii, jj] += cols[r, base + j]
    return out


@njit(**_JIT)
def conv3x3_forward(x, w, stride):
    n_img, c_in, h, wd = x.shape
    c_out = w.shape[0]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    wm = np.ascontiguousarray(w.reshape(c_out, c_in * 9))
    out = np.empty((n_img, c_out, ho, wo))
    for n in range(n_img):
        cols = _im2col(x[n], stride, ho, wo)
        out[n] = np.dot(wm, cols).reshape(c_out, ho, wo)
    return out


@njit(**_JIT)
def conv3x3_backward_input(g, w, stride, height, width):
    n_img, c_out, ho, wo = g.shape
    c_in = w.shape[1]
    wt = np.ascontiguousarray(w.reshape(c_out, c_in * 9).T)
    gx = np.empty((n_img, c_in, height, width))
    for n in range(n_img):
        gm = np.ascontiguousarray(g[n].reshape(c_out, ho * wo))
        gx[n] = _col2im(np.dot(wt, gm), c_in, height, width, stride, ho, wo)
    return gx


@njit(**_JIT)
def conv3x3_backward_weight(g, x, stride):
    n_img, c_out, ho, wo = g.shape
    c_in = x.shape[1]
    gw = np.zeros((c_out, c_in * 9))
    for n in range(n_img):
        cols = _im2col(x[n], stride, ho, wo)
        gm = np.ascontiguousarray(g[n].reshape(c_out, ho * wo))
        gw += np.dot(gm, cols.T)
    return gw.reshape(c_out, c_in, 3, 3)


@njit(**_JIT)
def _iou_matrix(a, b):
    out = np.zeros((a.shape[0], b.shape[0]))
    for p in range(a.shape[0]):
        area_a = (a[p, 2] - a[p, 0]) * (a[p, 3] - a[p, 1])
        for q in range(b.shape[0]):
            iw = min(a[p, 2], b[q, 2]) - max(a[p, 0], b[q, 0])
            ih = min(a[p, 3], b[q, 3]) - max(a[p, 1], b[q, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_a + (b[q, 2] - b[q, 0]) * (b[q, 3] - b[q, 1]) - inter
            if union > 0.0:
                out[p, q] = inter / union
    return out


def iou_matrix(a, b):
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    b = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    return _iou_matrix(a, b)


@njit(**_JIT)
def _greedy_nms(boxes, iou_thresh):
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    n_keep = 0
    for i in range(n):
        if suppressed[i]:
            continue
        keep[n_keep] = i
        n_keep += 1
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for j in range(i + 1, n):
            if suppressed[j]:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_i + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
            if union > 0.0 and inter / union > iou_thresh:
                suppressed[j] = True
    return keep[:n_keep]


def greedy_nms(boxes, iou_thresh):
    boxes = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    return _greedy_nms(boxes, float(iou_thresh))
