"""Dataset records, annotation file I/O, augmentation, and synthetic scenes.

Annotation files are UTF-8, line-oriented, one record per box:

    class<TAB>failure_mode|-<TAB>x_min<TAB>y_min<TAB>x_max<TAB>y_max

with integer pixel coordinates. A manifest is a line-oriented index of
`image_path<TAB>annotation_path` pairs, resolved relative to the manifest
file. Images are 8-bit RGB PNG.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image, ImageDraw
from scipy.ndimage import gaussian_filter

from .boxes import BoundingBox, Label, flip_horizontal


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class ManifestError(DatasetError):
    """Manifest file missing, empty, or malformed."""


class MissingFileError(DatasetError):
    """A file referenced by the manifest does not exist."""


class AnnotationFormatError(DatasetError):
    """Unparsable or degenerate annotation record; carries file and line."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class BoxBoundsError(DatasetError):
    """Annotation box extends outside the image."""


class RecipeError(ValueError):
    """Unknown augmentation op or bad parameter range."""


class SynthConfigError(ValueError):
    """Inconsistent synthetic-scene generator configuration."""


class SplitError(ValueError):
    """Too few scenes to split."""


class FailureMode(str, Enum):
    FALL_OUT = "fall_out"
    LIE_DOWN = "lie_down"
    LEAN_IN = "lean_in"
    STAND_ON = "stand_on"


VALID_ANGLES = (30, 45, 60, 90)


@dataclass(frozen=True)
class Annotation:
    label: Label
    box: BoundingBox  # pixel coordinates
    failure_mode: Optional[FailureMode] = None

    def __post_init__(self):
        if self.label is Label.FAILURE and self.failure_mode is None:
            raise ValueError("failure annotations require a failure_mode")
        if self.label is Label.SUCCESS and self.failure_mode is not None:
            raise ValueError("success annotations must not carry a failure_mode")
        if self.label is Label.BACKGROUND:
            raise ValueError("annotations must be success or failure")


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 uint8
    annotations: list[Annotation]
    camera_angle_deg: int = 45
    vial_fill: str = "empty"
    source: str = "synthetic"
    image_id: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


# ---------------------------------------------------------------------------
# Annotation and manifest I/O


def format_annotation(ann: Annotation) -> str:
    mode = ann.failure_mode.value if ann.failure_mode else "-"
    b = ann.box
    return (
        f"{ann.label.value}\t{mode}\t"
        f"{int(round(b.x_min))}\t{int(round(b.y_min))}\t{int(round(b.x_max))}\t{int(round(b.y_max))}"
    )


def save_annotations(annotations: Sequence[Annotation], path) -> None:
    text = "".join(format_annotation(a) + "\n" for a in annotations)
    Path(path).write_text(text, encoding="utf-8")


def parse_annotation_line(line: str, path, line_no: int) -> Annotation:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 6:
        raise AnnotationFormatError(path, line_no, f"expected 6 tab-separated fields, got {len(parts)}")
    cls_text, mode_text = parts[0], parts[1]
    try:
        label = Label(cls_text)
    except ValueError:
        raise AnnotationFormatError(path, line_no, f"unknown class {cls_text!r}")
    if label is Label.BACKGROUND:
        raise AnnotationFormatError(path, line_no, "background is not an annotation class")
    mode = None
    if mode_text != "-":
        try:
            mode = FailureMode(mode_text)
        except ValueError:
            raise AnnotationFormatError(path, line_no, f"unknown failure mode {mode_text!r}")
    try:
        coords = [int(v) for v in parts[2:]]
    except ValueError:
        raise AnnotationFormatError(path, line_no, f"non-integer coordinates in {parts[2:]}")
    x_min, y_min, x_max, y_max = coords
    if x_min >= x_max or y_min >= y_max:
        raise AnnotationFormatError(path, line_no, f"zero-area box {coords}")
    try:
        return Annotation(label, BoundingBox(x_min, y_min, x_max, y_max, label=label), mode)
    except ValueError as exc:
        raise AnnotationFormatError(path, line_no, str(exc))


def load_annotations(path) -> list[Annotation]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"annotation file not found: {path}")
    annotations = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        annotations.append(parse_annotation_line(line, path, line_no))
    return annotations


def load_manifest(path) -> list[tuple[Path, Path]]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ManifestError(f"{path}:{line_no}: expected image_path<TAB>annotation_path")
        entries.append((root / parts[0], root / parts[1]))
    if not entries:
        raise ManifestError(f"manifest is empty: {path}")
    return entries


def load_dataset(manifest_path, metadata: dict | None = None) -> list[Scene]:
    """Load every (image, annotation) pair listed in a manifest.

    Annotation boxes are validated against the image bounds; images are
    cached by path so manifests may reference a shared image file.
    """
    entries = load_manifest(manifest_path)
    metadata = metadata or {}
    image_cache: dict[Path, np.ndarray] = {}
    scenes = []
    for img_path, ann_path in entries:
        if img_path not in image_cache:
            if not img_path.exists():
                raise MissingFileError(f"image not found: {img_path}")
            image_cache[img_path] = np.asarray(Image.open(img_path).convert("RGB"))
        image = image_cache[img_path]
        annotations = load_annotations(ann_path)
        h, w = image.shape[:2]
        for ann in annotations:
            b = ann.box
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                raise BoxBoundsError(
                    f"{ann_path}: box ({b.x_min}, {b.y_min}, {b.x_max}, {b.y_max}) "
                    f"outside {w}x{h} image"
                )
        scenes.append(
            Scene(
                image=image,
                annotations=annotations,
                image_id=ann_path.stem,
                **metadata,
            )
        )
    return scenes


def save_dataset(scenes: Sequence[Scene], out_dir, manifest_name: str = "manifest.tsv") -> Path:
    """Write PNGs, annotation files, and a manifest under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, scene in enumerate(scenes):
        stem = scene.image_id or f"scene_{i:05d}"
        img_name, ann_name = f"{stem}.png", f"{stem}.txt"
        Image.fromarray(scene.image).save(out_dir / img_name)
        save_annotations(scene.annotations, out_dir / ann_name)
        lines.append(f"{img_name}\t{ann_name}")
    manifest = out_dir / manifest_name
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest


def split(scenes: Sequence[Scene], val_fraction: float, seed: int) -> tuple[list[Scene], list[Scene]]:
    """Deterministic shuffle-split at image granularity; disjoint and exhaustive."""
    if not (0.0 < val_fraction < 1.0):
        raise SplitError(f"val_fraction must lie in (0, 1): {val_fraction}")
    if len(scenes) < 2:
        raise SplitError(f"need at least 2 scenes to split, got {len(scenes)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(scenes))
    n_val = min(len(scenes) - 1, max(1, int(round(len(scenes) * val_fraction))))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(scenes) if i not in val_idx]
    val = [s for i, s in enumerate(scenes) if i in val_idx]
    return train, val


# ---------------------------------------------------------------------------
# Augmentation


def apply_brightness(image: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(np.rint(image.astype(np.float64) * factor), 0, 255).astype(np.uint8)


def apply_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    hsv = rgb_to_hsv(image.astype(np.float64) / 255.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * factor, 0.0, 1.0)
    return np.clip(np.rint(hsv_to_rgb(hsv) * 255.0), 0, 255).astype(np.uint8)


def apply_hue(image: np.ndarray, delta_degrees: float) -> np.ndarray:
    hsv = rgb_to_hsv(image.astype(np.float64) / 255.0)
    hsv[..., 0] = (hsv[..., 0] + delta_degrees / 360.0) % 1.0
    return np.clip(np.rint(hsv_to_rgb(hsv) * 255.0), 0, 255).astype(np.uint8)


def apply_gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    blurred = gaussian_filter(image.astype(np.float64), sigma=(sigma, sigma, 0))
    return np.clip(np.rint(blurred), 0, 255).astype(np.uint8)


def flip_scene(scene: Scene) -> Scene:
    """Mirror the image and every annotation box horizontally."""
    flipped = np.ascontiguousarray(scene.image[:, ::-1])
    annotations = [
        replace(a, box=flip_horizontal(a.box, scene.width)) for a in scene.annotations
    ]
    return replace(scene, image=flipped, annotations=annotations)


@dataclass(frozen=True)
class AugmentOp:
    """One augmentation step with its parameter range (probability for flip)."""

    name: str
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self):
        if self.name not in ("flip", "brightness", "saturation", "hue", "gaussian_blur"):
            raise RecipeError(f"unknown augmentation op {self.name!r}")
        if self.low > self.high:
            raise RecipeError(f"{self.name}: low {self.low} > high {self.high}")


def default_recipe() -> tuple[AugmentOp, ...]:
    return (
        AugmentOp("flip", 0.5, 0.5),
        AugmentOp("brightness", 0.6, 1.4),
        AugmentOp("saturation", 0.6, 1.4),
        AugmentOp("hue", -18.0, 18.0),
        AugmentOp("gaussian_blur", 0.5, 1.5),
    )


def augment(scene: Scene, recipe: Sequence[AugmentOp], seed: int) -> Scene:
    """Apply a recipe with parameters drawn from a per-scene seed.

    Photometric ops leave annotations untouched; flip transforms boxes.
    Same seed, scene, and recipe always produce the same output.
    """
    rng = np.random.default_rng(seed)
    out = scene
    for op in recipe:
        if op.name == "flip":
            if rng.random() < op.low:
                out = flip_scene(out)
        elif op.name == "brightness":
            out = replace(out, image=apply_brightness(out.image, rng.uniform(op.low, op.high)))
        elif op.name == "saturation":
            out = replace(out, image=apply_saturation(out.image, rng.uniform(op.low, op.high)))
        elif op.name == "hue":
            out = replace(out, image=apply_hue(out.image, rng.uniform(op.low, op.high)))
        elif op.name == "gaussian_blur":
            out = replace(out, image=apply_gaussian_blur(out.image, rng.uniform(op.low, op.high)))
        else:  # unreachable; AugmentOp validates names
            raise RecipeError(f"unknown augmentation op {op.name!r}")
    return out


# ---------------------------------------------------------------------------
# Synthetic scene generator

STATUS_NAMES = ("success", "fall_out", "lie_down", "lean_in", "stand_on")


@dataclass(frozen=True)
class SynthConfig:
    """Flat-shaded vial scenes over a holder grid; ground truth is exact."""

    canvas_size: int = 300
    holder_rows: int = 2
    holder_cols: int = 4
    status_probs: tuple[float, ...] = (0.7, 0.075, 0.075, 0.075, 0.075)  # STATUS_NAMES order
    vial_fill: str = "empty"
    view_squash: float = 1.0  # vertical glyph compression, a stand-in for camera angle
    clutter: int = 6
    noise_sigma: float = 4.0

    def __post_init__(self):
        if len(self.status_probs) != len(STATUS_NAMES):
            raise SynthConfigError(f"status_probs needs {len(STATUS_NAMES)} entries")
        if any(p < 0 for p in self.status_probs) or abs(sum(self.status_probs) - 1.0) > 1e-9:
            raise SynthConfigError(f"status probabilities must be non-negative and sum to 1: {self.status_probs}")
        if self.canvas_size < 60 or self.holder_rows < 1 or self.holder_cols < 1:
            raise SynthConfigError("canvas too small or empty holder grid")
        if not (0.2 <= self.view_squash <= 1.0):
            raise SynthConfigError(f"view_squash outside [0.2, 1.0]: {self.view_squash}")

    def holder_centers(self) -> list[tuple[float, float]]:
        s = self.canvas_size
        centers = []
        for r in range(self.holder_rows):
            cy = s * (r + 0.5) / self.holder_rows * 0.8 + 0.1 * s
            for c in range(self.holder_cols):
                cx = s * (c + 0.5) / self.holder_cols
                centers.append((cx, cy))
        return centers

    @property
    def holder_radius(self) -> float:
        return 0.055 * self.canvas_size

    def holder_footprints(self) -> list[BoundingBox]:
        r = self.holder_radius
        ry = r * self.view_squash
        return [
            BoundingBox(cx - r, cy - ry, cx + r, cy + ry)
            for cx, cy in self.holder_centers()
        ]


def _rotated_rect(cx, cy, w, h, angle_deg) -> list[tuple[float, float]]:
    a = math.radians(angle_deg)
    cos_a, sin_a = math.cos(a), math.sin(a)
    pts = []
    for dx, dy in ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)):
        pts.append((cx + dx * cos_a - dy * sin_a, cy + dx * sin_a + dy * cos_a))
    return pts


def _boxes_intersect(a: BoundingBox, b: BoundingBox) -> bool:
    return a.x_min < b.x_max and b.x_min < a.x_max and a.y_min < b.y_max and b.y_min < a.y_max


def _draw_vial_mask(size: int, cx, cy, w, h, angle_deg) -> np.ndarray:
    mask_img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(mask_img)
    draw.polygon(_rotated_rect(cx, cy, w, h, angle_deg), fill=255)
    return np.asarray(mask_img) > 0


def synthesize_scene(cfg: SynthConfig, seed: int) -> Scene:
    """Render one deterministic scene with exact ground-truth boxes.

    Upright in-holder vials are successes; the four failure modes render as
    displaced, lying, leaning, or on-top-of-holder glyphs.
    """
    rng = np.random.default_rng(seed)
    s = cfg.canvas_size
    squash = cfg.view_squash

    # Background: bench gray, stirrer plate, clutter, then per-pixel noise.
    base = rng.integers(95, 120)
    canvas = np.full((s, s, 3), base, dtype=np.float64)
    img = Image.fromarray(canvas.astype(np.uint8))
    draw = ImageDraw.Draw(img)
    plate = int(base) - 25
    draw.rectangle((int(0.04 * s), int(0.08 * s), int(0.96 * s), int(0.92 * s)), fill=(plate,) * 3)
    for _ in range(cfg.clutter):
        cx, cy = rng.uniform(0, s, size=2)
        cw, ch = rng.uniform(0.01 * s, 0.05 * s, size=2)
        shade = int(rng.integers(60, 150))
        draw.rectangle((cx - cw, cy - ch, cx + cw, cy + ch), fill=(shade,) * 3)

    # Holder rings.
    r = cfg.holder_radius
    ry = r * squash
    for cx, cy in cfg.holder_centers():
        draw.ellipse((cx - r, cy - ry, cx + r, cy + ry), outline=(45, 45, 55), width=max(2, s // 100))
    canvas = np.asarray(img).astype(np.float64)

    vial_w = 0.075 * s
    vial_h = 0.16 * s * squash
    footprints = cfg.holder_footprints()
    annotations: list[Annotation] = []
    placed_boxes: list[BoundingBox] = []

    probs = np.asarray(cfg.status_probs, dtype=np.float64)
    for holder_idx, (hx, hy) in enumerate(cfg.holder_centers()):
        status = STATUS_NAMES[rng.choice(len(STATUS_NAMES), p=probs)]
        jitter = rng.uniform(-0.006 * s, 0.006 * s, size=2)
        angle = 0.0
        w, h = vial_w, vial_h
        cx, cy = hx + jitter[0], hy + jitter[1]
        if status == "success":
            pass
        elif status == "stand_on":
            cy = hy - ry - 0.35 * vial_h  # bottom resting on the rim
        elif status == "lean_in":
            angle = rng.uniform(25, 40) * rng.choice((-1.0, 1.0))
            cy = hy - 0.25 * vial_h
        elif status == "lie_down":
            angle = 90.0 + rng.uniform(-6, 6)
            cy = hy + rng.uniform(-0.2, 0.2) * ry
        elif status == "fall_out":
            w2 = max(vial_w, vial_h)
            for _ in range(200):
                cx = rng.uniform(w2, s - w2)
                cy = rng.uniform(w2, s - w2)
                angle = 90.0 + rng.uniform(-10, 10)
                trial = BoundingBox(cx - vial_h / 2 - 2, cy - vial_w / 2 - 2,
                                    cx + vial_h / 2 + 2, cy + vial_w / 2 + 2)
                if not any(_boxes_intersect(trial, f) for f in footprints) and not any(
                    _boxes_intersect(trial, p) for p in placed_boxes
                ):
                    break
            else:
                continue  # no free space this scene; drop the vial

        mask = _draw_vial_mask(s, cx, cy, w, h, angle)
        if not mask.any():
            continue
        ys, xs = np.nonzero(mask)
        box = BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
        if any(_boxes_intersect(box, p) for p in placed_boxes):
            continue

        body = np.array([198, 214, 222], dtype=np.float64) + rng.uniform(-12, 12, size=3)
        canvas[mask] = body
        # Cap band at the vial mouth.
        cap_off = 0.38 * h
        cap_cx = cx + cap_off * math.sin(math.radians(angle))
        cap_cy = cy - cap_off * math.cos(math.radians(angle))
        cap_mask = _draw_vial_mask(s, cap_cx, cap_cy, w * 1.05, h * 0.22, angle) & mask
        canvas[cap_mask] = np.array([70, 90, 160], dtype=np.float64) + rng.uniform(-10, 10, size=3)
        if cfg.vial_fill == "solution":
            liq_off = 0.28 * h
            liq_cx = cx - liq_off * math.sin(math.radians(angle))
            liq_cy = cy + liq_off * math.cos(math.radians(angle))
            liq_mask = _draw_vial_mask(s, liq_cx, liq_cy, w * 0.9, h * 0.4, angle) & mask
            hue = rng.uniform(0.0, 1.0)
            color = hsv_to_rgb(np.array([hue, 0.85, 0.8])) * 255.0
            canvas[liq_mask] = color

        if status == "success":
            label, mode = Label.SUCCESS, None
        else:
            label, mode = Label.FAILURE, FailureMode(status)
        annotations.append(Annotation(label, replace(box, label=label), mode))
        placed_boxes.append(box)

    noisy = canvas + rng.normal(0.0, cfg.noise_sigma, size=canvas.shape)
    image = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
    return Scene(
        image=image,
        annotations=annotations,
        vial_fill=cfg.vial_fill,
        source="synthetic",
        image_id=f"synth_{seed:08d}",
    )


def synthesize_dataset(cfg: SynthConfig, n_scenes: int, seed: int) -> list[Scene]:
    """n_scenes deterministic scenes with per-scene seeds derived from seed."""
    return [synthesize_scene(cfg, seed * 1_000_003 + i) for i in range(n_scenes)]
