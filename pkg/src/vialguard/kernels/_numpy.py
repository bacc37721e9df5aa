"""Pure-numpy box kernels, the fallback when the compiled extension is absent."""

import numpy as np


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [N, 4] and [M, 4] corner-format box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])

    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]

    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore"):
        iou = np.where(inter > 0.0, inter / union, 0.0)
    return iou


def nms_keep(boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression over score-descending [N, 4] boxes; returns kept indices."""
    boxes = np.asarray(boxes, dtype=np.float64)
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = np.arange(i + 1, n)
        rest = rest[~suppressed[i + 1:]]
        if rest.size == 0:
            continue
        ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        suppressed[rest[ious >= iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)
