"""Detection evaluation: AP, mAP, PR curves, and PR AUC.

AP uses all-point interpolation with the precision envelope
p(r) = max_{r' >= r} precision(r'). Detections are assigned to ground truth
greedily in score order; each ground-truth box is claimed at most once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import BoundingBox, Label, iou

FOREGROUND_CLASSES = (Label.SUCCESS, Label.FAILURE)


@dataclass
class ClassEval:
    ap: float
    pr_points: list[tuple[float, float]]  # (recall, precision) at every rank
    auc: float
    tp: int
    fp: int
    fn: int


@dataclass
class EvalReport:
    per_class: dict[str, ClassEval]
    map_score: float
    auc: float
    iou_threshold: float

    def to_text(self) -> str:
        lines = [
            "evaluation report",
            f"iou_threshold\t{self.iou_threshold}",
            f"mAP\t{self.map_score:.6f}",
            f"AUC\t{self.auc:.6f}",
        ]
        for name, ce in self.per_class.items():
            lines.append("")
            lines.append(f"class\t{name}")
            lines.append(f"AP\t{ce.ap:.6f}")
            lines.append(f"AUC\t{ce.auc:.6f}")
            lines.append(f"TP\t{ce.tp}\tFP\t{ce.fp}\tFN\t{ce.fn}")
            lines.append("recall\tprecision")
            for r, p in ce.pr_points:
                lines.append(f"{r:.6f}\t{p:.6f}")
        return "\n".join(lines) + "\n"


def average_precision(ranked: Sequence[tuple[float, bool]], n_gt: int) -> float:
    """All-point interpolated AP from a score-descending (score, is_tp) list.

    n_gt == 0 with no detections is a vacuous perfect result (AP 1);
    n_gt == 0 with detections means every detection is spurious (AP 0).
    """
    scores = [s for s, _ in ranked]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValueError("ranked detections must be sorted by score descending")
    if n_gt < 0:
        raise ValueError(f"n_gt must be non-negative: {n_gt}")
    if n_gt == 0:
        return 1.0 if not ranked else 0.0
    if not ranked:
        return 0.0

    tp = np.cumsum([1.0 if is_tp else 0.0 for _, is_tp in ranked])
    ranks = np.arange(1, len(ranked) + 1)
    recall = tp / n_gt
    precision = tp / ranks

    # Precision envelope, then sum over recall steps.
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def pr_curve(ranked: Sequence[tuple[float, bool]], n_gt: int) -> list[tuple[float, float]]:
    """(recall, precision) at every rank of a score-descending detection list."""
    points = []
    tp = 0
    for rank, (_, is_tp) in enumerate(ranked, start=1):
        tp += int(is_tp)
        recall = tp / n_gt if n_gt > 0 else 0.0
        points.append((recall, tp / rank))
    return points


def pr_auc(points: Sequence[tuple[float, float]]) -> float:
    """Trapezoidal area under rank-resolved PR points, anchored at recall 0."""
    if not points:
        return 0.0
    rec = np.array([0.0] + [r for r, _ in points])
    pre = np.array([points[0][1]] + [p for _, p in points])
    return float(np.trapezoid(pre, rec))


def match_detections_to_gt(
    dets: Sequence[BoundingBox], gts: Sequence[BoundingBox], iou_threshold: float = 0.5
) -> list[bool]:
    """Greedy TP/FP flags: each detection claims the highest-IoU unclaimed
    same-class gt with IoU >= threshold."""
    scores = [d.score for d in dets]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValueError("detections must be sorted by score descending")
    claimed = [False] * len(gts)
    flags = []
    for det in dets:
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if claimed[j] or gt.label is not det.label:
                continue
            v = iou(det, gt)
            if v >= iou_threshold and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            claimed[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def compute_report(
    detections_per_scene: Sequence[Sequence[BoundingBox]],
    gts_per_scene: Sequence[Sequence[BoundingBox]],
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Pool detections over all scenes and score each foreground class."""
    per_class: dict[str, ClassEval] = {}
    for cls in FOREGROUND_CLASSES:
        ranked_all: list[tuple[float, bool, int]] = []  # (score, is_tp, scene)
        n_gt = 0
        for scene_idx, (dets, gts) in enumerate(zip(detections_per_scene, gts_per_scene)):
            cls_gts = [g for g in gts if g.label is cls]
            cls_dets = sorted((d for d in dets if d.label is cls), key=lambda d: -d.score)
            n_gt += len(cls_gts)
            flags = match_detections_to_gt(cls_dets, cls_gts, iou_threshold)
            ranked_all.extend((d.score, f, scene_idx) for d, f in zip(cls_dets, flags))
        ranked_all.sort(key=lambda t: -t[0])
        ranked = [(s, f) for s, f, _ in ranked_all]
        ap = average_precision(ranked, n_gt)
        points = pr_curve(ranked, n_gt)
        tp = sum(1 for _, f in ranked if f)
        per_class[cls.value] = ClassEval(
            ap=ap,
            pr_points=points,
            auc=pr_auc(points) if ranked else (1.0 if n_gt == 0 else 0.0),
            tp=tp,
            fp=len(ranked) - tp,
            fn=n_gt - tp,
        )
    map_score = mean_average_precision([ce.ap for ce in per_class.values()])
    auc = float(np.mean([ce.auc for ce in per_class.values()]))
    return EvalReport(per_class=per_class, map_score=map_score, auc=auc, iou_threshold=iou_threshold)


def mean_average_precision(per_class_aps: Sequence[float]) -> float:
    """Arithmetic mean of per-class APs."""
    if not per_class_aps:
        return 0.0
    return float(sum(per_class_aps) / len(per_class_aps))
