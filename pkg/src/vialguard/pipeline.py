"""Training loop, fine-tuning, inference, and evaluation over scene datasets.

The metric log is line-oriented: epoch<TAB>train_loss<TAB>val_loss<TAB>val_mAP.
Detection dumps are one record per detection:
image_id<TAB>class<TAB>score<TAB>x_min<TAB>y_min<TAB>x_max<TAB>y_max.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .boxes import AnchorSet, BoundingBox, GeometryError, Label, decode_array, generate_default_boxes, nms
from .data import Scene
from .losses import FOREGROUND_CLASSES, TrainingFaultError, build_targets, total_loss
from .metrics import EvalReport, compute_report
from .network import (
    CheckpointError,
    DenseSSD,
    build_model,
    check_config_compatible,
    load_checkpoint,
    save_checkpoint,
)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 500
    alpha: float = 0.5
    seed: int = 0
    neg_pos_ratio: float = 3.0
    match_threshold: float = 0.5
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative: {self.epochs}")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("optimizer hyperparameters must be non-negative")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1: {self.batch_size}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative: {self.alpha}")


def desk_config(**overrides) -> TrainConfig:
    """Desk-scale defaults so smoke runs finish in minutes on a CPU."""
    params = dict(learning_rate=5e-3, batch_size=16, epochs=30)
    params.update(overrides)
    return TrainConfig(**params)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_map: float

    def format(self) -> str:
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_loss:.6f}\t{self.val_map:.6f}"


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_checkpoint: Optional[Path]
    last_checkpoint: Optional[Path]
    best_val_map: float


def scene_to_tensor(scene: Scene, input_size: int) -> tuple[torch.Tensor, list[BoundingBox]]:
    """Resize to the model contract size and normalize pixels and boxes to [0, 1]."""
    img = Image.fromarray(scene.image).resize((input_size, input_size), Image.BILINEAR)
    tensor = torch.from_numpy(np.asarray(img).astype(np.float32) / 255.0).permute(2, 0, 1)
    w, h = scene.width, scene.height
    gts = []
    for ann in scene.annotations:
        b = ann.box
        gts.append(
            BoundingBox(b.x_min / w, b.y_min / h, b.x_max / w, b.y_max / h, label=ann.label)
        )
    return tensor, gts


class _PreparedDataset:
    """Scenes converted once: image tensors, normalized gts, encoded targets."""

    def __init__(self, scenes: Sequence[Scene], model: DenseSSD, anchors: AnchorSet, cfg: TrainConfig):
        size = model.cfg.input_size
        self.images = []
        self.gts = []
        self.targets = []
        for scene in scenes:
            tensor, gts = scene_to_tensor(scene, size)
            self.images.append(tensor)
            self.gts.append(gts)
            self.targets.append(build_targets(anchors, gts, cfg.match_threshold))
        self.scene_ids = [s.image_id for s in scenes]

    def __len__(self):
        return len(self.images)

    def batch(self, indices: Sequence[int]):
        images = torch.stack([self.images[i] for i in indices])
        gts = [self.gts[i] for i in indices]
        targets = [self.targets[i] for i in indices]
        return images, gts, targets


def _dataset_loss(model: DenseSSD, prepared: _PreparedDataset, anchors: AnchorSet, cfg: TrainConfig) -> float:
    was_training = model.training
    model.eval()
    losses = []
    try:
        with torch.no_grad():
            for start in range(0, len(prepared), cfg.batch_size):
                idx = range(start, min(start + cfg.batch_size, len(prepared)))
                images, gts, targets = prepared.batch(idx)
                breakdown = total_loss(
                    model(images), gts, anchors,
                    alpha=cfg.alpha, neg_pos_ratio=cfg.neg_pos_ratio, targets=targets,
                )
                losses.append(float(breakdown.total))
    finally:
        model.train(was_training)
    return float(np.mean(losses)) if losses else 0.0


def train(
    model: DenseSSD,
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    cfg: TrainConfig,
    out_dir=None,
    anchors: Optional[AnchorSet] = None,
    log_path=None,
) -> TrainResult:
    """SGD training with per-epoch validation loss/mAP and checkpointing.

    Deterministic per cfg.seed in single-worker mode: batch order, parameter
    updates, and the metric log all reproduce exactly.
    """
    if not train_scenes:
        raise ValueError("train_scenes must be non-empty")
    if cfg.epochs < 1:
        raise ValueError("train() needs at least one epoch; use fine_tune for epochs=0")
    anchors = anchors or generate_default_boxes(model.cfg.anchor_config())
    if len(anchors) != model.cfg.total_anchors:
        raise ValueError("anchor set inconsistent with model config")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    prepared_train = _PreparedDataset(train_scenes, model, anchors, cfg)
    prepared_val = _PreparedDataset(val_scenes, model, anchors, cfg) if val_scenes else None

    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
    )

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_file = Path(log_path) if log_path else (out_dir / "metrics.tsv" if out_dir else None)

    history: list[EpochRecord] = []
    best_val_map = -1.0
    best_path = out_dir / "best.ckpt" if out_dir else None
    last_path = out_dir / "last.ckpt" if out_dir else None

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(prepared_train))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size].tolist()
            if len(idx) == 1 and len(order) > 1:
                continue  # batch norm needs >= 2 samples in training mode
            images, gts, targets = prepared_train.batch(idx)
            optimizer.zero_grad()
            try:
                breakdown = total_loss(
                    model(images), gts, anchors,
                    alpha=cfg.alpha, neg_pos_ratio=cfg.neg_pos_ratio, targets=targets,
                )
            except TrainingFaultError as exc:
                scene_ids = [prepared_train.scene_ids[i] for i in idx]
                raise TrainingFaultError(
                    f"epoch {epoch}: {exc} (seed {cfg.seed}, scenes {scene_ids})",
                    batch_index=exc.batch_index,
                ) from exc
            breakdown.total.backward()
            optimizer.step()
            epoch_losses.append(float(breakdown.total.detach()))
        train_loss = float(np.mean(epoch_losses))
        if not np.isfinite(train_loss):
            raise TrainingFaultError(f"non-finite training loss at epoch {epoch} (seed {cfg.seed})")

        val_loss, val_map = 0.0, 0.0
        evaluated = prepared_val is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs)
        if evaluated:
            val_loss = _dataset_loss(model, prepared_val, anchors, cfg)
            val_map = evaluate(model, val_scenes, anchors=anchors).map_score
        record = EpochRecord(epoch, train_loss, val_loss, val_map)
        history.append(record)
        if log_file is not None:
            with open(log_file, "a", encoding="utf-8") as fh:
                fh.write(record.format() + "\n")

        if last_path is not None:
            save_checkpoint(last_path, model, cfg.seed, extra={"epoch": epoch})
        improved = evaluated and val_map > best_val_map
        if best_path is not None and (improved or best_val_map < 0):
            save_checkpoint(best_path, model, cfg.seed, extra={"epoch": epoch, "val_map": val_map})
        if evaluated:
            best_val_map = max(best_val_map, val_map)

    return TrainResult(history, best_path, last_path, best_val_map)


def fine_tune(
    checkpoint_path,
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    cfg: TrainConfig,
    out_dir=None,
    expected_config=None,
) -> tuple[Path, TrainResult]:
    """Resume training from a checkpoint, recording the provenance chain."""
    model, meta = load_checkpoint(checkpoint_path)
    if expected_config is not None:
        check_config_compatible(expected_config, meta["config"])
    provenance = meta["provenance"] + [str(checkpoint_path)]

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    tuned_path = (out_dir or Path(checkpoint_path).parent) / "finetuned.ckpt"

    if cfg.epochs == 0:
        save_checkpoint(tuned_path, model, cfg.seed, provenance=provenance)
        return tuned_path, TrainResult([], None, None, -1.0)

    result = train(model, train_scenes, val_scenes, cfg, out_dir=out_dir)
    save_checkpoint(tuned_path, model, cfg.seed, provenance=provenance)
    return tuned_path, result


def detect(
    model: DenseSSD,
    image: np.ndarray,
    anchors: Optional[AnchorSet] = None,
    iou_threshold: float = 0.45,
    score_threshold: float = 0.3,
    top_k: int = 200,
) -> list[BoundingBox]:
    """Run one image through forward, decode, clamp, and class-wise NMS.

    Returns pixel-coordinate detections in the input image frame, sorted by
    score descending.
    """
    anchors = anchors or generate_default_boxes(model.cfg.anchor_config())
    h, w = image.shape[:2]
    scene = Scene(image=image, annotations=[])
    tensor, _ = scene_to_tensor(scene, model.cfg.input_size)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            pred = model(tensor.unsqueeze(0))
    finally:
        model.train(was_training)

    probs = F.softmax(pred.conf[0], dim=-1).numpy()  # [A, C+1]
    offsets = pred.loc[0].numpy().astype(np.float64)
    boxes = decode_array(offsets, anchors.center_size, anchors.variances)
    boxes = np.clip(boxes, 0.0, 1.0)

    candidates = []
    for col, label in enumerate(FOREGROUND_CLASSES, start=1):
        keep = probs[:, col] >= score_threshold
        for a in np.nonzero(keep)[0]:
            x0, y0, x1, y1 = boxes[a]
            try:
                candidates.append(
                    BoundingBox(x0 * w, y0 * h, x1 * w, y1 * h, label=label,
                                score=float(probs[a, col]))
                )
            except GeometryError:
                continue  # decoded box collapsed after clamping
    return nms(candidates, iou_threshold=iou_threshold, score_threshold=score_threshold, top_k=top_k)


def evaluate(
    model: DenseSSD,
    scenes: Sequence[Scene],
    iou_threshold: float = 0.5,
    anchors: Optional[AnchorSet] = None,
    score_threshold: float = 0.3,
) -> EvalReport:
    """Per-class AP pooled over all scenes; order-invariant."""
    anchors = anchors or generate_default_boxes(model.cfg.anchor_config())
    dets_per_scene = []
    gts_per_scene = []
    for scene in scenes:
        dets_per_scene.append(detect(model, scene.image, anchors=anchors, score_threshold=score_threshold))
        gts_per_scene.append([ann.box for ann in scene.annotations])
    return compute_report(dets_per_scene, gts_per_scene, iou_threshold)


def format_detections(image_id: str, dets: Sequence[BoundingBox]) -> str:
    lines = [
        f"{image_id}\t{d.label.value}\t{d.score:.6f}\t"
        f"{d.x_min:.1f}\t{d.y_min:.1f}\t{d.x_max:.1f}\t{d.y_max:.1f}"
        for d in dets
    ]
    return "".join(line + "\n" for line in lines)
