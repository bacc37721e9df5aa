"""Shared fixtures; the expensive trained-model artifacts are session-scoped
so the end-to-end and transfer checks reuse one training run."""

from __future__ import annotations

import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vialguard import data, network, pipeline  # noqa: E402
from vialguard.boxes import generate_default_boxes  # noqa: E402

BENCH_SEED = 0


def bench_synth_config(view_squash: float = 1.0) -> data.SynthConfig:
    """Scene distribution used by the synthetic benchmark: 40% failures split
    evenly across the four failure modes."""
    return data.SynthConfig(
        status_probs=(0.6, 0.1, 0.1, 0.1, 0.1),
        view_squash=view_squash,
    )


@pytest.fixture(scope="session")
def micro_cfg() -> network.DenseSSDConfig:
    """Smallest config the spatial plan admits; cheap enough for gradient checks."""
    return network.DenseSSDConfig(
        input_size=150,
        stem_channels=8,
        growth_rate=2,
        db_layer_counts=(1, 1, 1, 1),
        pyramid_grids=(19, 10, 5, 3, 2, 1),
        head_boxes_per_location=(1, 1, 1, 1, 1, 1),
        fb_channels=8,
    )


@pytest.fixture(scope="session")
def micro_scenes() -> list[data.Scene]:
    return data.synthesize_dataset(bench_synth_config(), 8, seed=99)


@pytest.fixture(scope="session")
def e2e_artifacts(tmp_path_factory):
    """Train the benchmark model once: tiny DenseSSD, 200 train / 50 held-out."""
    out_dir = tmp_path_factory.mktemp("e2e")
    cfg = bench_synth_config()
    start = time.perf_counter()
    train_scenes = data.synthesize_dataset(cfg, 200, seed=BENCH_SEED)
    heldout_scenes = data.synthesize_dataset(cfg, 50, seed=BENCH_SEED + 1)
    tr, val = data.split(train_scenes, 0.1, seed=BENCH_SEED)

    model_cfg = network.tiny_config()
    model = network.build_model(model_cfg, seed=BENCH_SEED)
    train_cfg = pipeline.TrainConfig(
        learning_rate=1e-2, batch_size=16, epochs=16, seed=BENCH_SEED, eval_every=8,
    )
    result = pipeline.train(model, tr, val, train_cfg, out_dir=out_dir)
    anchors = generate_default_boxes(model_cfg.anchor_config())
    report = pipeline.evaluate(model, heldout_scenes, iou_threshold=0.5, anchors=anchors)
    elapsed = time.perf_counter() - start
    return {
        "model": model,
        "model_cfg": model_cfg,
        "anchors": anchors,
        "train_cfg": train_cfg,
        "train_scenes": train_scenes,
        "heldout_scenes": heldout_scenes,
        "result": result,
        "report": report,
        "out_dir": out_dir,
        "elapsed_seconds": elapsed,
    }


@pytest.fixture(scope="session")
def transfer_artifacts(e2e_artifacts, tmp_path_factory):
    """Fine-tune the benchmark checkpoint on a shifted-geometry target set."""
    out_dir = tmp_path_factory.mktemp("transfer")
    target_cfg = bench_synth_config(view_squash=0.55)
    target_train = data.synthesize_dataset(target_cfg, 40, seed=5)
    target_eval = data.synthesize_dataset(target_cfg, 20, seed=6)

    parent_ckpt = e2e_artifacts["result"].last_checkpoint
    zero_model, _ = network.load_checkpoint(parent_ckpt)
    zero_report = pipeline.evaluate(zero_model, target_eval, anchors=e2e_artifacts["anchors"])

    tune_cfg = pipeline.TrainConfig(learning_rate=5e-3, batch_size=16, epochs=5, seed=0)
    tuned_path, _ = pipeline.fine_tune(parent_ckpt, target_train, [], tune_cfg, out_dir=out_dir)
    tuned_model, tuned_meta = network.load_checkpoint(tuned_path)
    tuned_report = pipeline.evaluate(tuned_model, target_eval, anchors=e2e_artifacts["anchors"])
    return {
        "parent_ckpt": parent_ckpt,
        "zero_shot_map": zero_report.map_score,
        "tuned_map": tuned_report.map_score,
        "tuned_meta": tuned_meta,
        "tuned_path": tuned_path,
    }
