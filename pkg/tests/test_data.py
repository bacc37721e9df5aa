"""Dataset I/O, augmentation, splitting, and the synthetic scene generator."""

import numpy as np
import pytest

from conftest import bench_synth_config
from vialguard import data
from vialguard.boxes import BoundingBox, Label
from vialguard.data import (
    Annotation,
    AnnotationFormatError,
    AugmentOp,
    BoxBoundsError,
    FailureMode,
    ManifestError,
    MissingFileError,
    RecipeError,
    Scene,
    SplitError,
    SynthConfig,
    SynthConfigError,
    apply_brightness,
    apply_gaussian_blur,
    apply_hue,
    apply_saturation,
    augment,
    default_recipe,
    flip_scene,
    format_annotation,
    load_annotations,
    load_dataset,
    parse_annotation_line,
    save_annotations,
    save_dataset,
    split,
    synthesize_dataset,
    synthesize_scene,
)


def _scene(seed=0):
    return synthesize_scene(bench_synth_config(), seed)


class TestAnnotationFormat:
    def test_round_trip(self):
        ann = Annotation(
            Label.FAILURE,
            BoundingBox(10, 20, 40, 80, label=Label.FAILURE),
            FailureMode.LIE_DOWN,
        )
        line = format_annotation(ann)
        assert line == "failure\tlie_down\t10\t20\t40\t80"
        back = parse_annotation_line(line, "mem", 1)
        assert back == ann

    def test_success_dash_mode(self):
        ann = Annotation(Label.SUCCESS, BoundingBox(1, 2, 3, 4, label=Label.SUCCESS))
        assert format_annotation(ann).split("\t")[1] == "-"

    @pytest.mark.parametrize(
        "line,fragment",
        [
            ("success\t-\t1\t2\t3", "6 tab-separated fields"),
            ("widget\t-\t1\t2\t3\t4", "unknown class"),
            ("background\t-\t1\t2\t3\t4", "not an annotation class"),
            ("failure\texploded\t1\t2\t3\t4", "unknown failure mode"),
            ("success\t-\t1\t2\tthree\t4", "non-integer"),
            ("success\t-\t5\t2\t5\t4", "zero-area"),
            ("failure\t-\t1\t2\t3\t4", "failure_mode"),
            ("success\tlie_down\t1\t2\t3\t4", "failure_mode"),
        ],
    )
    def test_malformed_lines(self, line, fragment):
        with pytest.raises(AnnotationFormatError) as err:
            parse_annotation_line(line, "ann.txt", 7)
        assert fragment in str(err.value)
        assert err.value.line_no == 7

    def test_load_save_annotations(self, tmp_path):
        anns = [
            Annotation(Label.SUCCESS, BoundingBox(0, 0, 5, 5, label=Label.SUCCESS)),
            Annotation(
                Label.FAILURE,
                BoundingBox(6, 6, 9, 9, label=Label.FAILURE),
                FailureMode.FALL_OUT,
            ),
        ]
        path = tmp_path / "a.txt"
        save_annotations(anns, path)
        assert load_annotations(path) == anns

    def test_missing_annotation_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_annotations(tmp_path / "nope.txt")


class TestDatasetIO:
    def test_save_load_round_trip(self, tmp_path):
        scenes = synthesize_dataset(bench_synth_config(), 3, seed=2)
        manifest = save_dataset(scenes, tmp_path / "d")
        loaded = load_dataset(manifest)
        assert len(loaded) == 3
        for a, b in zip(scenes, loaded):
            assert np.array_equal(a.image, b.image)
            assert a.annotations == b.annotations
            assert b.image_id == a.image_id

    def test_round_trip_byte_equality(self, tmp_path):
        scenes = synthesize_dataset(bench_synth_config(), 2, seed=3)
        m1 = save_dataset(scenes, tmp_path / "one")
        m2 = save_dataset(load_dataset(m1), tmp_path / "two")
        for f1 in sorted(m1.parent.iterdir()):
            f2 = m2.parent / f1.name
            assert f1.read_bytes() == f2.read_bytes()

    def test_manifest_errors(self, tmp_path):
        with pytest.raises(ManifestError):
            load_dataset(tmp_path / "absent.tsv")
        empty = tmp_path / "empty.tsv"
        empty.write_text("")
        with pytest.raises(ManifestError):
            load_dataset(empty)
        bad = tmp_path / "bad.tsv"
        bad.write_text("only_one_field\n")
        with pytest.raises(ManifestError):
            load_dataset(bad)

    def test_missing_image(self, tmp_path):
        (tmp_path / "a.txt").write_text("success\t-\t1\t1\t5\t5\n")
        manifest = tmp_path / "m.tsv"
        manifest.write_text("ghost.png\ta.txt\n")
        with pytest.raises(MissingFileError):
            load_dataset(manifest)

    def test_box_bounds_checked(self, tmp_path):
        from PIL import Image

        Image.new("RGB", (20, 20)).save(tmp_path / "img.png")
        (tmp_path / "a.txt").write_text("success\t-\t1\t1\t30\t5\n")
        manifest = tmp_path / "m.tsv"
        manifest.write_text("img.png\ta.txt\n")
        with pytest.raises(BoxBoundsError):
            load_dataset(manifest)

    def test_shared_image_cached(self, tmp_path):
        from PIL import Image

        Image.new("RGB", (20, 20)).save(tmp_path / "img.png")
        (tmp_path / "a.txt").write_text("success\t-\t1\t1\t5\t5\n")
        (tmp_path / "b.txt").write_text("failure\tfall_out\t6\t6\t9\t9\n")
        manifest = tmp_path / "m.tsv"
        manifest.write_text("img.png\ta.txt\nimg.png\tb.txt\nimg.png\ta.txt\n")
        scenes = load_dataset(manifest)
        assert len(scenes) == 3
        assert scenes[0].image is scenes[1].image  # one decode, shared array


class TestSplit:
    def test_disjoint_exhaustive_deterministic(self):
        scenes = synthesize_dataset(bench_synth_config(), 10, seed=4)
        tr1, va1 = split(scenes, 0.3, seed=0)
        tr2, va2 = split(scenes, 0.3, seed=0)
        assert [s.image_id for s in tr1] == [s.image_id for s in tr2]
        assert [s.image_id for s in va1] == [s.image_id for s in va2]
        assert len(tr1) + len(va1) == 10
        assert len(va1) == 3
        assert not {s.image_id for s in tr1} & {s.image_id for s in va1}

    def test_seed_changes_split(self):
        scenes = synthesize_dataset(bench_synth_config(), 12, seed=5)
        _, va0 = split(scenes, 0.5, seed=0)
        _, va1 = split(scenes, 0.5, seed=1)
        assert {s.image_id for s in va0} != {s.image_id for s in va1}

    def test_errors(self):
        scenes = synthesize_dataset(bench_synth_config(), 2, seed=6)
        with pytest.raises(SplitError):
            split(scenes, 0.0, seed=0)
        with pytest.raises(SplitError):
            split(scenes[:1], 0.5, seed=0)

    def test_always_leaves_both_sides(self):
        scenes = synthesize_dataset(bench_synth_config(), 3, seed=7)
        tr, va = split(scenes, 0.99, seed=0)
        assert len(tr) >= 1 and len(va) >= 1


class TestAugmentation:
    def test_flip_involution(self):
        scene = _scene(10)
        back = flip_scene(flip_scene(scene))
        assert np.array_equal(back.image, scene.image)
        assert back.annotations == scene.annotations

    def test_flip_moves_boxes(self):
        scene = _scene(11)
        flipped = flip_scene(scene)
        for orig, flip in zip(scene.annotations, flipped.annotations):
            assert flip.box.x_min == pytest.approx(scene.width - orig.box.x_max)
            assert flip.box.y_min == orig.box.y_min
            assert flip.failure_mode == orig.failure_mode

    def test_brightness_identity(self):
        img = _scene(12).image
        assert np.array_equal(apply_brightness(img, 1.0), img)

    def test_brightness_monotone(self):
        img = _scene(12).image
        assert apply_brightness(img, 1.3).mean() >= img.mean()
        assert apply_brightness(img, 0.7).mean() <= img.mean()

    def test_hue_full_turn_identity(self):
        img = _scene(13).image
        assert np.max(np.abs(apply_hue(img, 360.0).astype(int) - img.astype(int))) <= 1

    def test_hue_rotates_pure_color(self):
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        img[..., 0] = 255  # pure red
        rotated = apply_hue(img, 120.0)
        assert np.all(rotated[..., 1] == 255)  # red -> green
        assert np.all(rotated[..., 0] == 0)

    def test_saturation_zero_grayscale(self):
        img = _scene(14).image
        gray = apply_saturation(img, 0.0)
        assert np.max(np.abs(gray[..., 0].astype(int) - gray[..., 1].astype(int))) <= 1

    def test_blur_preserves_mean(self):
        img = _scene(15).image
        blurred = apply_gaussian_blur(img, 1.0)
        assert abs(blurred.mean() - img.mean()) < 1.0
        assert blurred.dtype == np.uint8

    def test_photometric_ops_leave_annotations(self):
        scene = _scene(16)
        recipe = (
            AugmentOp("brightness", 0.6, 1.4),
            AugmentOp("saturation", 0.6, 1.4),
            AugmentOp("hue", -18.0, 18.0),
            AugmentOp("gaussian_blur", 0.5, 1.5),
        )
        out = augment(scene, recipe, seed=0)
        assert out.annotations == scene.annotations
        assert not np.array_equal(out.image, scene.image)

    def test_augment_deterministic(self):
        scene = _scene(17)
        a = augment(scene, default_recipe(), seed=42)
        b = augment(scene, default_recipe(), seed=42)
        assert np.array_equal(a.image, b.image)
        assert a.annotations == b.annotations
        c = augment(scene, default_recipe(), seed=43)
        assert not np.array_equal(a.image, c.image)

    def test_recipe_validation(self):
        with pytest.raises(RecipeError):
            AugmentOp("posterize", 0, 1)
        with pytest.raises(RecipeError):
            AugmentOp("hue", 5.0, -5.0)


class TestSynth:
    def test_deterministic(self):
        a = synthesize_scene(bench_synth_config(), 123)
        b = synthesize_scene(bench_synth_config(), 123)
        assert np.array_equal(a.image, b.image)
        assert a.annotations == b.annotations
        c = synthesize_scene(bench_synth_config(), 124)
        assert not np.array_equal(a.image, c.image)

    def test_dataset_scene_seeds_distinct(self):
        scenes = synthesize_dataset(bench_synth_config(), 4, seed=0)
        ids = {s.image_id for s in scenes}
        assert len(ids) == 4

    def test_annotations_consistent(self):
        for seed in range(5):
            scene = _scene(seed)
            assert scene.image.dtype == np.uint8
            assert scene.image.shape == (300, 300, 3)
            for ann in scene.annotations:
                b = ann.box
                assert 0 <= b.x_min < b.x_max <= scene.width
                assert 0 <= b.y_min < b.y_max <= scene.height
                if ann.label is Label.FAILURE:
                    assert ann.failure_mode is not None
                else:
                    assert ann.failure_mode is None

    def test_boxes_are_tight(self):
        # Every gt box edge should touch rendered vial pixels: the glyph body is
        # much brighter than the bench, so each box contains bright pixels near
        # all four edges.
        scene = synthesize_scene(
            SynthConfig(status_probs=(1.0, 0, 0, 0, 0), noise_sigma=0.0), 3
        )
        assert scene.annotations
        for ann in scene.annotations:
            b = ann.box
            patch = scene.image[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)]
            assert patch.max() > 160

    def test_all_success_distribution(self):
        scene = synthesize_scene(SynthConfig(status_probs=(1.0, 0, 0, 0, 0)), 9)
        assert all(a.label is Label.SUCCESS for a in scene.annotations)
        assert len(scene.annotations) == 8  # one vial per holder, none dropped

    def test_view_squash_shrinks_boxes(self):
        tall = synthesize_scene(SynthConfig(status_probs=(1.0, 0, 0, 0, 0)), 4)
        squashed = synthesize_scene(
            SynthConfig(status_probs=(1.0, 0, 0, 0, 0), view_squash=0.5), 4
        )
        mean_h = lambda s: np.mean([a.box.height for a in s.annotations])
        assert mean_h(squashed) < mean_h(tall)

    def test_config_validation(self):
        with pytest.raises(SynthConfigError):
            SynthConfig(status_probs=(0.5, 0.5))
        with pytest.raises(SynthConfigError):
            SynthConfig(status_probs=(0.5, 0.2, 0.2, 0.2, 0.2))
        with pytest.raises(SynthConfigError):
            SynthConfig(view_squash=0.1)
        with pytest.raises(SynthConfigError):
            SynthConfig(canvas_size=10)


def test_annotation_validation():
    with pytest.raises(ValueError):
        Annotation(Label.FAILURE, BoundingBox(0, 0, 1, 1))
    with pytest.raises(ValueError):
        Annotation(Label.SUCCESS, BoundingBox(0, 0, 1, 1), FailureMode.LIE_DOWN)
    with pytest.raises(ValueError):
        Annotation(Label.BACKGROUND, BoundingBox(0, 0, 1, 1))


def test_scene_dimensions():
    scene = Scene(image=np.zeros((30, 40, 3), dtype=np.uint8), annotations=[])
    assert scene.height == 30 and scene.width == 40
