"""The detector network: dense-block mainstream, densely connected pyramid, heads.

The mainstream is four dense blocks separated by transition layers (1x1 conv +
2x2 average pool). The pyramid is six feature blocks; each block after the
first consumes the reduced previous feature block concatenated with a lateral
stream (a transition output or an extra stride-2 conv). Per-level detection
heads emit box offsets and class logits for every default box location.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .boxes import AnchorConfig

CHECKPOINT_FORMAT_VERSION = 1


class ModelBuildError(ValueError):
    """Configuration is inconsistent with the pooling/stride plan."""


class CheckpointError(RuntimeError):
    """Checkpoint missing, malformed, or config-incompatible."""


@dataclass(frozen=True)
class DenseSSDConfig:
    """Architecture hyperparameters.

    num_classes counts foreground classes; logits carry one extra background
    column at index 0.
    """

    input_size: int = 300
    input_channels: int = 3
    stem_channels: int = 64
    growth_rate: int = 32
    db_layer_counts: tuple[int, ...] = (6, 8, 16, 6)
    pyramid_grids: tuple[int, ...] = (38, 19, 10, 5, 3, 1)
    head_boxes_per_location: tuple[int, ...] = (4, 6, 6, 6, 4, 4)
    num_classes: int = 2
    fb_channels: int = 128

    def __post_init__(self):
        if len(self.db_layer_counts) != 4:
            raise ModelBuildError("exactly four dense blocks are required")
        if len(self.pyramid_grids) != 6 or len(self.head_boxes_per_location) != 6:
            raise ModelBuildError("exactly six pyramid levels are required")
        positives = (
            self.input_size, self.input_channels, self.stem_channels, self.growth_rate,
            self.fb_channels, *self.db_layer_counts, *self.pyramid_grids,
            *self.head_boxes_per_location,
        )
        if any(v <= 0 for v in positives):
            raise ModelBuildError("all size/count fields must be positive")
        if self.num_classes < 1:
            raise ModelBuildError("at least one foreground class is required")

    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(grids=self.pyramid_grids, boxes_per_location=self.head_boxes_per_location)

    @property
    def total_anchors(self) -> int:
        return self.anchor_config().total_anchors


def tiny_config(num_classes: int = 2) -> DenseSSDConfig:
    """Desk-scale configuration used by the smoke benchmarks and fast tests."""
    return DenseSSDConfig(
        input_size=150,
        stem_channels=32,
        growth_rate=8,
        db_layer_counts=(2, 2, 4, 2),
        pyramid_grids=(19, 10, 5, 3, 2, 1),
        head_boxes_per_location=(4, 4, 4, 4, 4, 4),
        num_classes=num_classes,
        fb_channels=64,
    )


class Predictions(NamedTuple):
    """Raw per-anchor network outputs."""

    loc: torch.Tensor   # [B, A, 4]
    conf: torch.Tensor  # [B, A, num_classes + 1] logits


def _pool_out(size: int, ceil_mode: bool) -> int:
    return math.ceil(size / 2) if ceil_mode else size // 2


def _bn_relu_conv(in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0) -> nn.Sequential:
    # Pre-activation ordering: BN and ReLU ahead of every conv.
    return nn.Sequential(
        nn.BatchNorm2d(in_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=padding),
    )


class DenseLayer(nn.Module):
    """Bottleneck 1x1 conv then 3x3 conv emitting growth_rate channels."""

    def __init__(self, in_ch: int, growth_rate: int):
        super().__init__()
        self.bottleneck = _bn_relu_conv(in_ch, 4 * growth_rate, 1)
        self.conv = _bn_relu_conv(4 * growth_rate, growth_rate, 3, padding=1)

    def forward(self, x):
        return self.conv(self.bottleneck(x))


class DenseBlock(nn.Module):
    """Each internal layer sees the concatenation of the block input and all
    previous layer outputs."""

    def __init__(self, in_ch: int, n_layers: int, growth_rate: int):
        super().__init__()
        self.layers = nn.ModuleList(
            DenseLayer(in_ch + j * growth_rate, growth_rate) for j in range(n_layers)
        )
        self.out_channels = in_ch + n_layers * growth_rate

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return x


class Transition(nn.Module):
    """1x1 conv halving channels, then 2x2 average pool stride 2."""

    def __init__(self, in_ch: int, ceil_mode: bool):
        super().__init__()
        self.out_channels = in_ch // 2
        self.conv = _bn_relu_conv(in_ch, self.out_channels, 1)
        self.pool = nn.AvgPool2d(2, stride=2, ceil_mode=ceil_mode)

    def forward(self, x):
        return self.pool(self.conv(x))


class Reduction(nn.Module):
    """2x2 average pool then 1x1 conv, keeping feature-block depth."""

    def __init__(self, channels: int, ceil_mode: bool):
        super().__init__()
        self.pool = nn.AvgPool2d(2, stride=2, ceil_mode=ceil_mode)
        self.conv = _bn_relu_conv(channels, channels, 1)

    def forward(self, x):
        return self.conv(self.pool(x))


class FeatureBlock(nn.Module):
    """3x3 conv over the concatenated input streams, emitting fb_channels."""

    def __init__(self, in_ch: int, fb_channels: int):
        super().__init__()
        self.conv = _bn_relu_conv(in_ch, fb_channels, 3, padding=1)

    def forward(self, *streams):
        x = streams[0] if len(streams) == 1 else torch.cat(streams, dim=1)
        return self.conv(x)


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _plan_extra_conv(stage: str, in_size: int, out_size: int) -> int:
    """Choose padding for a 3x3 stride-2 conv hitting the configured grid."""
    for padding in (1, 0):
        if _conv_out(in_size, 3, 2, padding) == out_size:
            return padding
    raise ModelBuildError(
        f"{stage}: no 3x3 stride-2 padding maps size {in_size} to grid {out_size}"
    )


def _plan_pool(stage: str, in_size: int, out_size: int) -> bool:
    """Choose ceil/floor mode for a 2x2 stride-2 pool hitting the target size."""
    if _pool_out(in_size, ceil_mode=True) == out_size:
        return True
    if _pool_out(in_size, ceil_mode=False) == out_size:
        return False
    raise ModelBuildError(f"{stage}: 2x2 stride-2 pool cannot map size {in_size} to {out_size}")


class DenseSSD(nn.Module):
    def __init__(self, cfg: DenseSSDConfig):
        super().__init__()
        self.cfg = cfg
        g = cfg.growth_rate
        grids = cfg.pyramid_grids

        # Mainstream spatial plan: stem halves, each transition halves again.
        size = _conv_out(cfg.input_size, 3, 2, 1)
        self.stem = nn.Conv2d(cfg.input_channels, cfg.stem_channels, 3, stride=2, padding=1)

        blocks, transitions = [], []
        channels = cfg.stem_channels
        trans_sizes = []
        for i, n_layers in enumerate(cfg.db_layer_counts):
            block = DenseBlock(channels, n_layers, g)
            channels = block.out_channels
            target = _pool_out(size, ceil_mode=True)
            ceil = _plan_pool(f"transition_{i + 1}", size, target)
            transitions.append(Transition(channels, ceil))
            blocks.append(block)
            channels //= 2
            size = target
            trans_sizes.append(size)
        self.dense_blocks = nn.ModuleList(blocks)
        self.transitions = nn.ModuleList(transitions)

        # Lateral streams: transitions 2..4 feed pyramid levels 0..2 directly.
        for level in range(3):
            if trans_sizes[level + 1] != grids[level]:
                raise ModelBuildError(
                    f"pyramid level {level + 1}: mainstream size {trans_sizes[level + 1]} "
                    f"!= configured grid {grids[level]}"
                )
        trans_channels = [t.out_channels for t in self.transitions]

        fb = cfg.fb_channels
        self.feature_blocks = nn.ModuleList()
        self.reductions = nn.ModuleList()
        self.extra_convs = nn.ModuleList()
        for level in range(6):
            if level == 0:
                in_ch = trans_channels[1]
            elif level in (1, 2):
                in_ch = fb + trans_channels[level + 1]
            else:
                padding = _plan_extra_conv(f"extra_conv_{level + 1}", grids[level - 1], grids[level])
                self.extra_convs.append(
                    nn.Conv2d(fb, fb, 3, stride=2, padding=padding)
                )
                in_ch = 2 * fb
            if level > 0:
                ceil = _plan_pool(f"reduction_{level}", grids[level - 1], grids[level])
                self.reductions.append(Reduction(fb, ceil))
            self.feature_blocks.append(FeatureBlock(in_ch, fb))

        n_out = cfg.num_classes + 1
        self.loc_heads = nn.ModuleList(
            nn.Conv2d(fb, b * 4, 3, padding=1) for b in cfg.head_boxes_per_location
        )
        self.conf_heads = nn.ModuleList(
            nn.Conv2d(fb, b * n_out, 3, padding=1) for b in cfg.head_boxes_per_location
        )

    def pyramid_features(self, images: torch.Tensor) -> list[torch.Tensor]:
        """Run the backbone and pyramid, returning the six feature-block outputs."""
        if images.shape[-2:] != (self.cfg.input_size, self.cfg.input_size):
            raise ValueError(
                f"expected {self.cfg.input_size}x{self.cfg.input_size} input, "
                f"got {tuple(images.shape[-2:])}"
            )
        x = self.stem(images)
        laterals = []
        for block, trans in zip(self.dense_blocks, self.transitions):
            x = trans(block(x))
            laterals.append(x)

        features = []
        prev = None
        for level, fb in enumerate(self.feature_blocks):
            if level == 0:
                out = fb(laterals[1])
            elif level in (1, 2):
                out = fb(self.reductions[level - 1](prev), laterals[level + 1])
            else:
                out = fb(self.reductions[level - 1](prev), self.extra_convs[level - 3](prev))
            features.append(out)
            prev = out
        return features

    def forward(self, images: torch.Tensor) -> Predictions:
        features = self.pyramid_features(images)
        batch = images.shape[0]
        n_out = self.cfg.num_classes + 1
        locs, confs = [], []
        for feat, loc_head, conf_head in zip(features, self.loc_heads, self.conf_heads):
            loc = loc_head(feat).permute(0, 2, 3, 1).reshape(batch, -1, 4)
            conf = conf_head(feat).permute(0, 2, 3, 1).reshape(batch, -1, n_out)
            locs.append(loc)
            confs.append(conf)
        return Predictions(torch.cat(locs, dim=1), torch.cat(confs, dim=1))


def build_model(cfg: DenseSSDConfig, seed: int = 0) -> DenseSSD:
    """Construct the network with deterministic He-style initialization."""
    model = DenseSSD(cfg)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, module in sorted(model.named_modules(), key=lambda kv: kv[0]):
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                module.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
    # Evaluation mode by default; the trainer flips to train mode itself.
    # (Batch norm needs batches of >= 2 in training because of the 1x1 level.)
    model.eval()
    return model


def count_parameters(model: nn.Module) -> int:
    """Exact trainable scalar count."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def count_macs(model: DenseSSD, input_size: int | None = None) -> int:
    """Multiply-accumulate count for one forward pass.

    Convention: one MAC is one multiply plus one add; a convolution costs
    C_in/groups * C_out * k_h * k_w * H_out * W_out. Pooling, normalization,
    and activations count zero.
    """
    size = input_size or model.cfg.input_size
    total = 0
    hooks = []

    def record(module, _inputs, output):
        nonlocal total
        h, w = output.shape[-2:]
        kh, kw = module.kernel_size
        total += (module.in_channels // module.groups) * module.out_channels * kh * kw * h * w

    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            hooks.append(module.register_forward_hook(record))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, model.cfg.input_channels, size, size))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return total


def extract_feature_maps(model: DenseSSD, image: torch.Tensor) -> list[np.ndarray]:
    """Channel-averaged activation of each feature block, min-max scaled to [0, 1].

    Constant maps are returned as zeros.
    """
    if image.dim() == 3:
        image = image.unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            features = model.pyramid_features(image)
    finally:
        model.train(was_training)
    maps = []
    for feat in features:
        fm = feat[0].mean(dim=0).cpu().numpy().astype(np.float64)
        lo, hi = fm.min(), fm.max()
        maps.append((fm - lo) / (hi - lo) if hi > lo else np.zeros_like(fm))
    return maps


def save_checkpoint(
    path,
    model: DenseSSD,
    seed: int,
    provenance: list[str] | None = None,
    extra: dict | None = None,
) -> None:
    """Self-describing checkpoint: config echo, seed, provenance chain, weights."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.cfg),
        "seed": seed,
        "provenance": list(provenance or []),
        "state_dict": model.state_dict(),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[DenseSSD, dict]:
    """Rebuild the model from a checkpoint; returns (model, metadata)."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"not a recognizable checkpoint: {path}")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {payload['format_version']}")
    cfg_dict = dict(payload["config"])
    for key in ("db_layer_counts", "pyramid_grids", "head_boxes_per_location"):
        cfg_dict[key] = tuple(cfg_dict[key])
    cfg = DenseSSDConfig(**cfg_dict)
    model = DenseSSD(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    meta = {k: payload[k] for k in ("format_version", "seed", "provenance", "extra")}
    meta["config"] = cfg
    return model, meta


def check_config_compatible(expected: DenseSSDConfig, loaded: DenseSSDConfig) -> None:
    """Raise CheckpointError naming the first divergent field."""
    for key, value in asdict(expected).items():
        other = asdict(loaded)[key]
        if tuple(value) != tuple(other) if isinstance(value, (list, tuple)) else value != other:
            raise CheckpointError(f"checkpoint config mismatch on '{key}': {other} != {value}")
