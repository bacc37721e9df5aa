"""Multibox training objective: smooth-L1 localization plus mined softmax confidence.

Class indexing convention throughout: logit column 0 is background, columns
1..C are the foreground classes in Label order (success, failure).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import AnchorSet, BoundingBox, Label, MatchAssignment, encode_array, match
from .network import Predictions

FOREGROUND_CLASSES = (Label.SUCCESS, Label.FAILURE)


class TrainingFaultError(RuntimeError):
    """Non-finite predictions or loss; carries the offending batch index."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


@dataclass
class LossBreakdown:
    """total keeps the autograd graph; conf/loc are raw (unnormalized) sums."""

    total: torch.Tensor
    conf: float
    loc: float
    n_positive: int
    n_negative_mined: int


def smooth_l1(x):
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside; continuous and C1 at the knee."""
    if isinstance(x, torch.Tensor):
        ax = x.abs()
        return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def class_index(label: Label) -> int:
    """Logit column for a label (0 is background)."""
    if label is Label.BACKGROUND:
        return 0
    return FOREGROUND_CLASSES.index(label) + 1


def localization_loss(
    pred_loc: torch.Tensor, encoded_targets: torch.Tensor, assignment: MatchAssignment
) -> torch.Tensor:
    """Sum of smooth-L1 offsets over positive anchors. Negatives contribute nothing."""
    if pred_loc.shape != encoded_targets.shape:
        raise ValueError(f"shape mismatch: {tuple(pred_loc.shape)} vs {tuple(encoded_targets.shape)}")
    pos = torch.from_numpy(assignment.positive)
    if not pos.any():
        return pred_loc.new_zeros(())
    diff = pred_loc[pos] - encoded_targets[pos]
    return smooth_l1(diff).sum()


def confidence_loss(
    pred_conf: torch.Tensor,
    target_class: torch.Tensor,
    assignment: MatchAssignment,
    neg_pos_ratio: float = 3.0,
) -> tuple[torch.Tensor, int]:
    """Softmax loss over positives plus the hard-negative subset.

    Negatives are the non-positive anchors ranked by background loss
    descending, truncated at neg_pos_ratio * N. Zero when N == 0.
    Returns (loss, number of mined negatives).
    """
    pos = torch.from_numpy(assignment.positive)
    n_pos = assignment.n_positive
    if n_pos == 0:
        return pred_conf.new_zeros(()), 0
    log_probs = F.log_softmax(pred_conf, dim=-1)
    pos_loss = -log_probs[pos, target_class[pos]].sum()

    background_loss = -log_probs[:, 0]
    background_loss = background_loss.masked_fill(pos, float("-inf"))
    n_neg = min(int(neg_pos_ratio * n_pos), int((~pos).sum()))
    if n_neg == 0:
        return pos_loss, 0
    hard = torch.topk(background_loss, n_neg).values
    return pos_loss + hard.sum(), n_neg


def build_targets(
    anchors: AnchorSet, gts: Sequence[BoundingBox], match_threshold: float = 0.5
) -> tuple[MatchAssignment, torch.Tensor, torch.Tensor]:
    """Match one scene's ground truth and produce encoded offsets + class targets."""
    assignment = match(anchors, gts, match_threshold)
    n_anchors = len(anchors)
    target_loc = np.zeros((n_anchors, 4), dtype=np.float64)
    target_cls = np.zeros(n_anchors, dtype=np.int64)
    pos_idx = np.nonzero(assignment.positive)[0]
    if pos_idx.size:
        gt_cs = np.stack([gts[assignment.gt_index[i]].as_center_size() for i in pos_idx])
        target_loc[pos_idx] = encode_array(gt_cs, anchors.center_size[pos_idx], anchors.variances)
        target_cls[pos_idx] = [class_index(gts[assignment.gt_index[i]].label) for i in pos_idx]
    return assignment, torch.from_numpy(target_loc), torch.from_numpy(target_cls)


def total_loss(
    pred: Predictions,
    gts_per_image: Sequence[Sequence[BoundingBox]],
    anchors: AnchorSet,
    alpha: float = 0.5,
    neg_pos_ratio: float = 3.0,
    match_threshold: float = 0.5,
    targets=None,
) -> LossBreakdown:
    """Per-batch mean of per-image (conf + alpha * loc) / N; N == 0 images contribute 0.

    targets may carry precomputed build_targets output per image to avoid
    re-matching every step.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative: {alpha}")
    batch = pred.loc.shape[0]
    if len(gts_per_image) != batch:
        raise ValueError(f"got {len(gts_per_image)} gt lists for batch of {batch}")
    for b in range(batch):
        if not (torch.isfinite(pred.loc[b]).all() and torch.isfinite(pred.conf[b]).all()):
            raise TrainingFaultError(f"non-finite predictions at batch index {b}", batch_index=b)

    total = pred.loc.new_zeros(())
    conf_sum = 0.0
    loc_sum = 0.0
    n_pos_total = 0
    n_neg_total = 0
    for b, gts in enumerate(gts_per_image):
        if targets is not None:
            assignment, target_loc, target_cls = targets[b]
        else:
            assignment, target_loc, target_cls = build_targets(anchors, gts, match_threshold)
        if assignment.n_positive == 0:
            continue
        dtype = pred.loc.dtype
        loc = localization_loss(pred.loc[b], target_loc.to(dtype), assignment)
        conf, n_neg = confidence_loss(pred.conf[b], target_cls, assignment, neg_pos_ratio)
        total = total + (conf + alpha * loc) / assignment.n_positive
        conf_sum += float(conf.detach())
        loc_sum += float(loc.detach())
        n_pos_total += assignment.n_positive
        n_neg_total += n_neg
    total = total / batch
    if not torch.isfinite(total):
        raise TrainingFaultError("non-finite total loss")
    return LossBreakdown(total, conf_sum, loc_sum, n_pos_total, n_neg_total)
