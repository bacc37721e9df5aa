# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled box kernels: pairwise IoU and greedy NMS.

Same contracts as vialguard.kernels._numpy; selected at import time by
vialguard.kernels when the extension built successfully.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def iou_matrix(cnp.float64_t[:, ::1] a, cnp.float64_t[:, ::1] b):
    """Pairwise IoU between two corner-format box arrays.

    Args:
        a: [N, 4] boxes as (x_min, y_min, x_max, y_max)
        b: [M, 4] boxes, same format

    Returns:
        [N, M] float64 IoU matrix
    """
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef cnp.float64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double ax0, ay0, ax1, ay1, area_a, area_b
    cdef double ix0, iy0, ix1, iy1, iw, ih, inter, union

    for i in range(n):
        ax0 = a[i, 0]
        ay0 = a[i, 1]
        ax1 = a[i, 2]
        ay1 = a[i, 3]
        area_a = (ax1 - ax0) * (ay1 - ay0)
        for j in range(m):
            ix0 = ax0 if ax0 > b[j, 0] else b[j, 0]
            iy0 = ay0 if ay0 > b[j, 1] else b[j, 1]
            ix1 = ax1 if ax1 < b[j, 2] else b[j, 2]
            iy1 = ay1 if ay1 < b[j, 3] else b[j, 3]
            iw = ix1 - ix0
            ih = iy1 - iy0
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            union = area_a + area_b - inter
            out[i, j] = inter / union
    return out_arr


def nms_keep(cnp.float64_t[:, ::1] boxes, double iou_threshold):
    """Greedy suppression over score-descending boxes.

    Args:
        boxes: [N, 4] corner-format boxes, already sorted by score descending
        iou_threshold: boxes with IoU >= threshold to a kept box are dropped

    Returns:
        int64 array of kept indices, in input (score) order
    """
    cdef Py_ssize_t n = boxes.shape[0]
    suppressed_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] suppressed = suppressed_arr
    keep = []
    cdef Py_ssize_t i, j
    cdef double ax0, ay0, ax1, ay1, area_a
    cdef double ix0, iy0, ix1, iy1, iw, ih, inter, union

    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        ax0 = boxes[i, 0]
        ay0 = boxes[i, 1]
        ax1 = boxes[i, 2]
        ay1 = boxes[i, 3]
        area_a = (ax1 - ax0) * (ay1 - ay0)
        for j in range(i + 1, n):
            if suppressed[j]:
                continue
            ix0 = ax0 if ax0 > boxes[j, 0] else boxes[j, 0]
            iy0 = ay0 if ay0 > boxes[j, 1] else boxes[j, 1]
            ix1 = ax1 if ax1 < boxes[j, 2] else boxes[j, 2]
            iy1 = ay1 if ay1 < boxes[j, 3] else boxes[j, 3]
            iw = ix1 - ix0
            ih = iy1 - iy0
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            union = area_a + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
            if inter / union >= iou_threshold:
                suppressed[j] = 1
    return np.asarray(keep, dtype=np.int64)
