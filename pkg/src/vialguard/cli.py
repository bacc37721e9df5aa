"""Command-line surface: generate / train / evaluate / detect / watch / bench / viz.

Exit codes: 0 success, 1 usage error, 2 runtime fault. Defaults may be
overridden by a line-oriented key=value config file given via --config or the
VIALGUARD_CONFIG environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import data, kernels, pipeline, sentinel
from .boxes import generate_default_boxes
from .network import (
    DenseSSDConfig,
    build_model,
    count_macs,
    count_parameters,
    extract_feature_maps,
    load_checkpoint,
    tiny_config,
)


class UsageError(Exception):
    pass


def load_config_file(path) -> dict[str, str]:
    values = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key=value")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _model_config(name: str) -> DenseSSDConfig:
    if name == "default":
        return DenseSSDConfig()
    if name == "tiny":
        return tiny_config()
    raise UsageError(f"unknown model config {name!r} (expected default|tiny)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vialguard")
    parser.add_argument("--config", help="key=value config file (or set VIALGUARD_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--canvas", type=int, default=300)
    p.add_argument("--fill", choices=("empty", "solution"), default="empty")
    p.add_argument("--failure-rate", type=float, default=0.3)
    p.add_argument("--view-squash", type=float, default=1.0)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="tiny", help="default|tiny")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", help="report file (default stdout)")

    p = sub.add_parser("detect", help="detect on one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--score-threshold", type=float, default=0.3)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("--top-k", type=int, default=200)
    p.add_argument("--out", help="detection dump file (default stdout)")

    p = sub.add_parser("watch", help="sentinel loop over a frame directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--webhook", help="HTTP POST endpoint")
    p.add_argument("--socket", help="host:port stream endpoint")
    p.add_argument("--token", help="bearer token for the webhook")
    p.add_argument("--score-threshold", type=float, default=0.5)
    p.add_argument("--frames-required", type=int, default=1)
    p.add_argument("--cooldown", type=float, default=30.0)
    p.add_argument("--incident-log", default="incidents.jsonl")
    p.add_argument("--auto-resume", action="store_true")

    p = sub.add_parser("bench", help="parameter/MAC report and kernel benchmark")
    p.add_argument("--model", default="default", help="default|tiny")
    p.add_argument("--kernels", action="store_true", help="time compiled vs pure-python box kernels")

    p = sub.add_parser("viz", help="export per-level feature maps for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_generate(args) -> int:
    fr = args.failure_rate
    cfg = data.SynthConfig(
        canvas_size=args.canvas,
        vial_fill=args.fill,
        view_squash=args.view_squash,
        status_probs=(1.0 - fr, fr / 4, fr / 4, fr / 4, fr / 4),
    )
    scenes = data.synthesize_dataset(cfg, args.scenes, args.seed)
    manifest = data.save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {manifest}")
    return 0


def _cmd_train(args) -> int:
    scenes = data.load_dataset(args.data)
    train_scenes, val_scenes = data.split(scenes, args.val_fraction, args.seed)
    model_cfg = _model_config(args.model)
    model = build_model(model_cfg, seed=args.seed)
    cfg = pipeline.TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
    )
    result = pipeline.train(model, train_scenes, val_scenes, cfg, out_dir=args.out)
    print(f"best val mAP {result.best_val_map:.4f}; checkpoints in {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    scenes = data.load_dataset(args.data)
    report = pipeline.evaluate(model, scenes, iou_threshold=args.iou)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    print(f"mAP {report.map_score:.4f}")
    return 0


def _cmd_detect(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    image = np.asarray(Image.open(args.image).convert("RGB"))
    dets = pipeline.detect(
        model, image,
        iou_threshold=args.nms_iou, score_threshold=args.score_threshold, top_k=args.top_k,
    )
    dump = pipeline.format_detections(Path(args.image).stem, dets)
    if args.out:
        Path(args.out).write_text(dump, encoding="utf-8")
    else:
        sys.stdout.write(dump)
    return 0


def _cmd_watch(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    anchors = generate_default_boxes(model.cfg.anchor_config())

    transport = None
    if args.webhook:
        transport = sentinel.HttpTransport(args.webhook, bearer_token=args.token)
    elif args.socket:
        host, _, port = args.socket.rpartition(":")
        transport = sentinel.SocketTransport(host, int(port))

    policy = sentinel.AlertPolicy(
        failure_score_threshold=args.score_threshold,
        consecutive_frames_required=args.frames_required,
        cooldown_seconds=args.cooldown,
    )
    stats = sentinel.watch(
        sentinel.directory_frames(args.frames),
        detector=lambda img: pipeline.detect(model, img, anchors=anchors),
        policy=policy,
        transport=transport,
        controller=sentinel.HaltController(auto_resume=args.auto_resume),
        incident_log=sentinel.IncidentLog(args.incident_log),
    )
    print(
        f"frames {stats.frames} skipped {stats.skipped} "
        f"halts {stats.halts} alerts {stats.alerts}"
    )
    return 0


def _bench_kernels() -> None:
    from .kernels import _numpy as fallback

    rng = np.random.default_rng(0)
    n = 4000
    xy = rng.uniform(0, 0.9, size=(n, 2))
    wh = rng.uniform(0.02, 0.1, size=(n, 2))
    boxes = np.concatenate([xy, xy + wh], axis=1)

    backends = [("python", fallback)]
    if kernels.BACKEND == "compiled":
        from .kernels import _boxops
        backends.insert(0, ("compiled", _boxops))

    print(f"active backend: {kernels.BACKEND}")
    for name, impl in backends:
        start = time.perf_counter()
        impl.iou_matrix(np.ascontiguousarray(boxes[:1000]), np.ascontiguousarray(boxes[:1000]))
        iou_t = time.perf_counter() - start
        start = time.perf_counter()
        impl.nms_keep(np.ascontiguousarray(boxes), 0.45)
        nms_t = time.perf_counter() - start
        print(f"{name:>9}: iou_matrix(1000x1000) {iou_t * 1e3:8.2f} ms   nms(4000) {nms_t * 1e3:8.2f} ms")


def _cmd_bench(args) -> int:
    cfg = _model_config(args.model)
    model = build_model(cfg, seed=0)
    params = count_parameters(model)
    macs = count_macs(model)
    print(f"model config: {args.model}")
    print(f"parameters: {params} ({params / 1e6:.2f} M)")
    print(f"MACs per forward at {cfg.input_size}x{cfg.input_size}: {macs} ({macs / 1e6:.1f} M)")
    print(f"anchors: {cfg.total_anchors}")
    if args.kernels:
        _bench_kernels()
    return 0


def _cmd_viz(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    image = np.asarray(Image.open(args.image).convert("RGB"))
    tensor, _ = pipeline.scene_to_tensor(data.Scene(image=image, annotations=[]), model.cfg.input_size)
    maps = extract_feature_maps(model, tensor)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, fm in enumerate(maps, start=1):
        arr = (fm * 255.0).astype(np.uint8)
        Image.fromarray(arr).resize((256, 256), Image.NEAREST).save(out_dir / f"feature_map_{i}.png")
    print(f"wrote {len(maps)} feature maps to {out_dir}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "detect": _cmd_detect,
    "watch": _cmd_watch,
    "bench": _cmd_bench,
    "viz": _cmd_viz,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)

    # Config-file values act as defaults: keys become subcommand flags unless
    # the same flag was given explicitly.
    config_path = None
    if "--config" in argv:
        idx = argv.index("--config")
        config_path = argv[idx + 1] if idx + 1 < len(argv) else None
    config_path = config_path or os.environ.get("VIALGUARD_CONFIG")
    if config_path:
        try:
            overrides = load_config_file(config_path)
        except (OSError, UsageError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        for key, value in overrides.items():
            flag = f"--{key}"
            if flag not in argv:
                argv.extend([flag, value])

    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1

    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime fault
        print(f"fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
