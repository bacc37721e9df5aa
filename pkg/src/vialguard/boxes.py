"""Bounding-box arithmetic, default-box generation, matching, and NMS.

Coordinates are normalized to [0, 1] internally; pixel coordinates appear
only at I/O boundaries where the image size is explicit. All functions here
are pure and safe to call from concurrent workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import kernels


class GeometryError(ValueError):
    """Degenerate box or invalid geometric argument."""


class AnchorConfigError(ValueError):
    """Inconsistent default-box configuration."""


class Label(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    BACKGROUND = "background"


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with a class label and optional confidence score."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: Label = Label.BACKGROUND
    score: Optional[float] = None

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates: {coords}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise GeometryError(f"degenerate box (zero or negative area): {coords}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise GeometryError(f"score outside [0, 1]: {self.score}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def as_center_size(self) -> np.ndarray:
        cx, cy = self.center
        return np.array([cx, cy, self.width, self.height], dtype=np.float64)

    @classmethod
    def from_center_size(cls, cx, cy, w, h, label=Label.BACKGROUND, score=None) -> "BoundingBox":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h, label, score)

    def with_label(self, label: Label, score: Optional[float] = None) -> "BoundingBox":
        return replace(self, label=label, score=score)


class OffsetVector(NamedTuple):
    """Dimensionless regression targets: center deltas plus width/height log-ratios."""

    t_cx: float
    t_cy: float
    t_w: float
    t_h: float


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def flip_horizontal(box: BoundingBox, width: float) -> BoundingBox:
    """Mirror a box across the vertical midline of an image of the given width."""
    if box.x_min < 0 or box.x_max > width:
        raise GeometryError(f"box exceeds image width {width}: ({box.x_min}, {box.x_max})")
    return replace(box, x_min=width - box.x_max, x_max=width - box.x_min)


def encode(gt: BoundingBox, anchor: BoundingBox, variances: tuple[float, float] = (0.1, 0.2)) -> OffsetVector:
    """Encode a ground-truth box as offsets from an anchor (center-size form)."""
    if gt.width <= 0 or gt.height <= 0:
        raise GeometryError("ground-truth box must have positive size")
    v_c, v_s = variances
    d_cx, d_cy = anchor.center
    g_cx, g_cy = gt.center
    return OffsetVector(
        (g_cx - d_cx) / (anchor.width * v_c),
        (g_cy - d_cy) / (anchor.height * v_c),
        math.log(gt.width / anchor.width) / v_s,
        math.log(gt.height / anchor.height) / v_s,
    )


def decode(off: OffsetVector, anchor: BoundingBox, variances: tuple[float, float] = (0.1, 0.2)) -> BoundingBox:
    """Exact inverse of encode. Output is not clamped here."""
    if not all(math.isfinite(t) for t in off):
        raise GeometryError(f"non-finite offsets: {off}")
    v_c, v_s = variances
    d_cx, d_cy = anchor.center
    cx = off.t_cx * anchor.width * v_c + d_cx
    cy = off.t_cy * anchor.height * v_c + d_cy
    w = anchor.width * math.exp(off.t_w * v_s)
    h = anchor.height * math.exp(off.t_h * v_s)
    return BoundingBox.from_center_size(cx, cy, w, h)


def encode_array(gt_cs: np.ndarray, anchor_cs: np.ndarray, variances=(0.1, 0.2)) -> np.ndarray:
    """Vectorized encode over center-size [N, 4] arrays (gt and anchor aligned)."""
    v_c, v_s = variances
    out = np.empty_like(gt_cs, dtype=np.float64)
    out[:, 0] = (gt_cs[:, 0] - anchor_cs[:, 0]) / (anchor_cs[:, 2] * v_c)
    out[:, 1] = (gt_cs[:, 1] - anchor_cs[:, 1]) / (anchor_cs[:, 3] * v_c)
    out[:, 2] = np.log(gt_cs[:, 2] / anchor_cs[:, 2]) / v_s
    out[:, 3] = np.log(gt_cs[:, 3] / anchor_cs[:, 3]) / v_s
    return out


def decode_array(offsets: np.ndarray, anchor_cs: np.ndarray, variances=(0.1, 0.2)) -> np.ndarray:
    """Vectorized decode; returns corner-format [N, 4] boxes."""
    v_c, v_s = variances
    cx = offsets[:, 0] * anchor_cs[:, 2] * v_c + anchor_cs[:, 0]
    cy = offsets[:, 1] * anchor_cs[:, 3] * v_c + anchor_cs[:, 1]
    w = anchor_cs[:, 2] * np.exp(offsets[:, 2] * v_s)
    h = anchor_cs[:, 3] * np.exp(offsets[:, 3] * v_s)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


@dataclass(frozen=True)
class AnchorConfig:
    """Default-box scheme over a pyramid of feature-map grids."""

    grids: tuple[int, ...] = (38, 19, 10, 5, 3, 1)
    boxes_per_location: tuple[int, ...] = (4, 6, 6, 6, 4, 4)
    s_min: float = 0.1
    s_max: float = 0.9
    variances: tuple[float, float] = (0.1, 0.2)

    def __post_init__(self):
        if len(self.grids) != len(self.boxes_per_location):
            raise AnchorConfigError("grids and boxes_per_location must have equal length")
        if not self.grids:
            raise AnchorConfigError("at least one pyramid level required")
        if any(g <= 0 for g in self.grids) or any(b <= 0 for b in self.boxes_per_location):
            raise AnchorConfigError("grid sizes and boxes-per-location must be positive")
        if self.s_min <= 0 or self.s_max <= 0 or self.s_min > self.s_max:
            raise AnchorConfigError(f"invalid scale range ({self.s_min}, {self.s_max})")
        if any(b > 6 for b in self.boxes_per_location):
            raise AnchorConfigError("at most 6 boxes per location are defined")

    def level_scales(self) -> list[float]:
        n = len(self.grids)
        if n == 1:
            return [self.s_min]
        step = (self.s_max - self.s_min) / (n - 1)
        return [self.s_min + k * step for k in range(n)]

    @property
    def total_anchors(self) -> int:
        return sum(g * g * b for g, b in zip(self.grids, self.boxes_per_location))


@dataclass(frozen=True)
class AnchorSet:
    """The fixed grid of default boxes, ordered level-major, row-major, aspect-minor."""

    config: AnchorConfig
    center_size: np.ndarray = field(repr=False)  # [A, 4] as (cx, cy, w, h)

    def __len__(self) -> int:
        return self.center_size.shape[0]

    @property
    def corners(self) -> np.ndarray:
        cs = self.center_size
        return np.stack(
            [
                cs[:, 0] - 0.5 * cs[:, 2],
                cs[:, 1] - 0.5 * cs[:, 3],
                cs[:, 0] + 0.5 * cs[:, 2],
                cs[:, 1] + 0.5 * cs[:, 3],
            ],
            axis=1,
        )

    @property
    def variances(self) -> tuple[float, float]:
        return self.config.variances

    def box(self, i: int) -> BoundingBox:
        cx, cy, w, h = self.center_size[i]
        return BoundingBox.from_center_size(cx, cy, w, h)


def _per_location_shapes(scale: float, next_scale: float, count: int) -> list[tuple[float, float]]:
    """(w, h) variants for one grid location: unit square, geometric-mean square,
    then aspect ratios 2, 1/2, 3, 1/3, truncated to count."""
    variants = [(scale, 1.0), (math.sqrt(scale * next_scale), 1.0)]
    for ar in (2.0, 0.5, 3.0, 1.0 / 3.0):
        variants.append((scale, ar))
    shapes = []
    for s, ar in variants[:count]:
        root = math.sqrt(ar)
        shapes.append((s * root, s / root))
    return shapes


def generate_default_boxes(cfg: AnchorConfig) -> AnchorSet:
    """Deterministically tile default boxes across the configured pyramid."""
    scales = cfg.level_scales()
    rows = []
    n_levels = len(cfg.grids)
    step = (cfg.s_max - cfg.s_min) / (n_levels - 1) if n_levels > 1 else (1.0 - cfg.s_min)
    for level, (grid, count) in enumerate(zip(cfg.grids, cfg.boxes_per_location)):
        scale = scales[level]
        next_scale = min(1.0, scale + step)
        shapes = _per_location_shapes(scale, next_scale, count)
        for row in range(grid):
            cy = (row + 0.5) / grid
            for col in range(grid):
                cx = (col + 0.5) / grid
                for w, h in shapes:
                    rows.append((cx, cy, w, h))
    center_size = np.asarray(rows, dtype=np.float64)
    assert center_size.shape[0] == cfg.total_anchors
    return AnchorSet(config=cfg, center_size=center_size)


@dataclass
class MatchAssignment:
    """Per-anchor matching result against one scene's ground truth."""

    gt_index: np.ndarray  # [A] int64, -1 where unmatched
    positive: np.ndarray  # [A] bool
    n_positive: int

    def __post_init__(self):
        assert self.n_positive == int(self.positive.sum())


def match(anchors: AnchorSet, gts: Sequence[BoundingBox], threshold: float = 0.5) -> MatchAssignment:
    """Assign anchors to ground-truth boxes.

    Bipartite best-match first: ground truths and anchors are paired greedily
    by descending IoU so every gt claims one anchor unconditionally. Remaining
    anchors become positive for their max-IoU gt when that IoU >= threshold.
    """
    if not (0.0 < threshold <= 1.0):
        raise GeometryError(f"threshold must be in (0, 1]: {threshold}")
    n_anchors = len(anchors)
    gt_index = np.full(n_anchors, -1, dtype=np.int64)
    if len(gts) == 0:
        return MatchAssignment(gt_index, np.zeros(n_anchors, dtype=bool), 0)

    gt_corners = np.stack([g.as_array() for g in gts])
    ious = kernels.iou_matrix(anchors.corners, gt_corners)  # [A, G]

    # Best-match phase: repeatedly take the globally best (anchor, gt) pair
    # among unclaimed gts so ties over a shared anchor resolve deterministically.
    remaining = ious.copy()
    claimed_anchors: set[int] = set()
    for _ in range(min(len(gts), n_anchors)):
        a_idx, g_idx = np.unravel_index(np.argmax(remaining), remaining.shape)
        if remaining[a_idx, g_idx] < 0.0:
            break
        gt_index[a_idx] = g_idx
        claimed_anchors.add(int(a_idx))
        remaining[a_idx, :] = -1.0
        remaining[:, g_idx] = -1.0

    best_gt = ious.argmax(axis=1)
    best_iou = ious.max(axis=1)
    threshold_hit = best_iou >= threshold
    for a in np.nonzero(threshold_hit)[0]:
        if int(a) not in claimed_anchors:
            gt_index[a] = best_gt[a]

    positive = gt_index >= 0
    return MatchAssignment(gt_index, positive, int(positive.sum()))


def nms(
    dets: Sequence[BoundingBox],
    iou_threshold: float = 0.45,
    score_threshold: float = 0.3,
    top_k: int = 200,
) -> list[BoundingBox]:
    """Class-wise greedy non-maximum suppression; output sorted by score."""
    if not (0.0 <= iou_threshold <= 1.0) or not (0.0 <= score_threshold <= 1.0):
        raise GeometryError("nms thresholds must lie in [0, 1]")
    scored = [d for d in dets if d.score is not None and d.score >= score_threshold]
    kept: list[BoundingBox] = []
    for label in sorted({d.label for d in scored}, key=lambda l: l.value):
        group = sorted((d for d in scored if d.label == label), key=lambda d: -d.score)
        corners = np.stack([d.as_array() for d in group])
        keep_idx = kernels.nms_keep(corners, iou_threshold)
        kept.extend(group[i] for i in keep_idx)
    kept.sort(key=lambda d: -d.score)
    return kept[:top_k]
