"""Synthetic video generation and the simulated detector."""

import dataclasses

import numpy as np
import pytest

from propseg.datasets import (
    CATEGORY_IDS,
    MIN_COLOR_DISTANCE,
    DetectorModel,
    InstanceSpec,
    SceneSpec,
    build_suite,
    corrupt_detections,
    erode_mask,
    generate_video,
    random_scene,
    standard_suite,
)
from propseg.errors import ConfigError

import reference


def make_spec(instances, width=64, height=64, frame_count=8, background="flat"):
    return SceneSpec(
        width=width,
        height=height,
        frame_count=frame_count,
        background=background,
        instances=tuple(instances),
    )


RED = (1.0, 0.2, 0.2)
GREEN = (0.2, 1.0, 0.2)
BLUE = (0.2, 0.2, 1.0)


class TestSpecValidation:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            InstanceSpec(kind="triangle", color=RED, start=(10, 10),
                         size=(4,), velocity=(0, 0))

    def test_color_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            InstanceSpec(kind="disk", color=(1.5, 0, 0), start=(10, 10),
                         size=(4,), velocity=(0, 0))

    def test_nonpositive_size_rejected(self):
        with pytest.raises(ConfigError):
            InstanceSpec(kind="rectangle", color=RED, start=(10, 10),
                         size=(8, 0), velocity=(0, 0))

    def test_category_mapping(self):
        disk = InstanceSpec(kind="disk", color=RED, start=(10, 10),
                            size=(4,), velocity=(0, 0))
        rect = InstanceSpec(kind="rectangle", color=GREEN, start=(20, 20),
                            size=(6, 4), velocity=(0, 0))
        assert disk.category == CATEGORY_IDS["disk"]
        assert rect.category == CATEGORY_IDS["rectangle"]

    def test_empty_scene_rejected(self):
        with pytest.raises(ConfigError):
            make_spec([])

    def test_too_many_instances_rejected(self):
        insts = [
            InstanceSpec(kind="disk", color=(0.1 * k, 0.5, 0.5),
                         start=(10 + 5 * k, 30), size=(3,), velocity=(0, 0))
            for k in range(7)
        ]
        with pytest.raises(ConfigError):
            make_spec(insts)

    def test_near_identical_colors_rejected(self):
        a = InstanceSpec(kind="disk", color=(0.5, 0.5, 0.5), start=(15, 15),
                         size=(4,), velocity=(0, 0))
        b = InstanceSpec(kind="disk", color=(0.55, 0.45, 0.55), start=(45, 45),
                         size=(4,), velocity=(0, 0))
        with pytest.raises(ConfigError):
            make_spec([a, b])

    def test_instance_outside_image_rejected(self):
        inst = InstanceSpec(kind="disk", color=RED, start=(2, 30),
                            size=(5,), velocity=(0, 0))
        with pytest.raises(ConfigError):
            make_spec([inst])

    def test_oversized_instance_rejected(self):
        inst = InstanceSpec(kind="rectangle", color=RED, start=(32, 32),
                            size=(100, 10), velocity=(0, 0))
        with pytest.raises(ConfigError):
            make_spec([inst])

    def test_bad_background_rejected(self):
        inst = InstanceSpec(kind="disk", color=RED, start=(32, 32),
                            size=(5,), velocity=(0, 0))
        with pytest.raises(ConfigError):
            make_spec([inst], background="stripes")

    def test_detector_model_validation(self):
        with pytest.raises(ConfigError):
            DetectorModel(miss_rate=1.2)
        with pytest.raises(ConfigError):
            DetectorModel(box_jitter=-1.0)
        with pytest.raises(ConfigError):
            DetectorModel(mask_erosion=-1)


class TestGenerateVideo:
    def test_static_rectangle_exact_geometry(self):
        # center on integer coordinates, even extents: no pixel center lands
        # on the boundary, so the mask is exactly size[0] x size[1] pixels
        inst = InstanceSpec(kind="rectangle", color=RED, start=(20.0, 20.0),
                            size=(10, 6), velocity=(0.0, 0.0))
        video = generate_video(make_spec([inst]))
        track = video.tracks[0]
        assert set(track.masks) == set(range(8))
        for t in range(8):
            assert track.masks[t].sum() == 60
            assert track.boxes[t].as_tuple() == (15.0, 17.0, 25.0, 23.0)
            np.testing.assert_array_equal(track.masks[t], track.masks[0])

    def test_disk_area_near_pi_r_squared(self):
        r = 10.0
        inst = InstanceSpec(kind="disk", color=BLUE, start=(32.0, 32.0),
                            size=(r,), velocity=(0.0, 0.0))
        video = generate_video(make_spec([inst], frame_count=1))
        area = video.tracks[0].masks[0].sum()
        assert abs(area - np.pi * r * r) <= 4 * r

    def test_mask_matches_painted_pixels(self):
        inst = InstanceSpec(kind="disk", color=RED, start=(30.0, 25.0),
                            size=(7.0,), velocity=(1.0, -2.0))
        video = generate_video(make_spec([inst]))
        for t, mask in video.tracks[0].masks.items():
            painted = np.all(
                np.abs(video.frames[t] - np.array(RED)) < 0.5 / 255, axis=-1
            )
            np.testing.assert_array_equal(mask.astype(bool), painted)

    def test_later_instance_occludes_earlier(self):
        behind = InstanceSpec(kind="rectangle", color=RED, start=(20.0, 20.0),
                              size=(12, 12), velocity=(0, 0))
        front = InstanceSpec(kind="rectangle", color=GREEN, start=(26.0, 20.0),
                             size=(12, 12), velocity=(0, 0))
        video = generate_video(make_spec([behind, front], frame_count=1))
        m_behind = video.tracks[0].masks[0].astype(bool)
        m_front = video.tracks[1].masks[0].astype(bool)
        assert not (m_behind & m_front).any()
        # front keeps its full 12x12 footprint, behind loses the overlap
        assert m_front.sum() == 144
        assert m_behind.sum() == 144 - 6 * 12
        frame = video.frames[0]
        assert np.all(np.abs(frame[m_front] - np.array(GREEN)) < 0.5 / 255)
        assert np.all(np.abs(frame[m_behind] - np.array(RED)) < 0.5 / 255)

    def test_fully_occluded_frame_has_no_entry(self):
        hidden = InstanceSpec(kind="disk", color=RED, start=(32.0, 32.0),
                              size=(3.0,), velocity=(0, 0))
        cover = InstanceSpec(kind="rectangle", color=GREEN, start=(32.0, 32.0),
                             size=(20, 20), velocity=(0, 0))
        video = generate_video(make_spec([hidden, cover], frame_count=4))
        assert video.tracks[0].masks == {}
        assert set(video.tracks[1].masks) == set(range(4))

    def test_border_reflection_keeps_shape_inside(self):
        # starts one pixel from the left wall moving left: must bounce
        inst = InstanceSpec(kind="rectangle", color=RED, start=(6.0, 20.0),
                            size=(10, 6), velocity=(-3.0, 0.0))
        video = generate_video(make_spec([inst], frame_count=20))
        for t in range(20):
            mask = video.tracks[0].masks[t]
            assert mask.sum() == 60  # never clipped by the border
            box = video.tracks[0].boxes[t]
            assert 0 <= box.x1 < box.x2 <= 64
            assert 0 <= box.y1 < box.y2 <= 64
        # it actually moved
        assert video.tracks[0].boxes[0] != video.tracks[0].boxes[3]

    def test_frames_are_8bit_quantized(self):
        inst = InstanceSpec(kind="disk", color=(0.37, 0.81, 0.24),
                            start=(32.0, 32.0), size=(8.0,), velocity=(1, 1))
        video = generate_video(make_spec([inst], frame_count=3))
        scaled = video.frames * 255.0
        np.testing.assert_allclose(scaled, np.round(scaled), atol=1e-9)

    def test_flat_background_value(self):
        inst = InstanceSpec(kind="disk", color=RED, start=(32.0, 32.0),
                            size=(4.0,), velocity=(0, 0))
        video = generate_video(make_spec([inst], frame_count=1))
        corner = video.frames[0, 0, 0]
        np.testing.assert_allclose(corner, np.round(0.12 * 255) / 255)

    def test_gradient_background_increases_along_x(self):
        inst = InstanceSpec(kind="disk", color=RED, start=(32.0, 32.0),
                            size=(4.0,), velocity=(0, 0))
        video = generate_video(
            make_spec([inst], frame_count=1, background="gradient")
        )
        top_row = video.frames[0, 0, :, 0]  # background only
        assert top_row[-1] > top_row[0]
        assert np.all(np.diff(top_row) >= 0)

    def test_determinism(self):
        spec = random_scene(11, width=64, height=64, frame_count=6)
        a = generate_video(spec)
        b = generate_video(spec)
        np.testing.assert_array_equal(a.frames, b.frames)
        for ta, tb in zip(a.tracks, b.tracks):
            assert set(ta.masks) == set(tb.masks)
            for t in ta.masks:
                np.testing.assert_array_equal(ta.masks[t], tb.masks[t])


class TestErodeMask:
    def test_full_square_shrinks_by_border(self):
        mask = np.ones((5, 5))
        out = erode_mask(mask, 1)
        expected = np.zeros((5, 5))
        expected[1:4, 1:4] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_three_by_three_leaves_center(self):
        mask = np.zeros((7, 7))
        mask[2:5, 2:5] = 1.0
        out = erode_mask(mask, 1)
        assert out.sum() == 1
        assert out[3, 3] == 1.0

    def test_zero_iterations_is_identity(self):
        mask = np.zeros((6, 6))
        mask[1:5, 2:4] = 1.0
        np.testing.assert_array_equal(erode_mask(mask, 0), mask)

    def test_matches_per_pixel_reference(self, rng):
        from conftest import random_blob_mask

        for _ in range(10):
            mask = random_blob_mask(rng, 12, 15)
            ref = mask.copy()
            for _ in range(2):
                ref = reference.erode_once_loops(ref)
            np.testing.assert_array_equal(erode_mask(mask, 2), ref)


def two_instance_video(frame_count=24):
    a = InstanceSpec(kind="disk", color=RED, start=(16.0, 16.0),
                     size=(6.0,), velocity=(1.5, 0.5))
    b = InstanceSpec(kind="rectangle", color=GREEN, start=(46.0, 46.0),
                     size=(12, 8), velocity=(-1.0, 0.0))
    return generate_video(make_spec([a, b], frame_count=frame_count))


class TestCorruptDetections:
    def test_identity_model_reproduces_ground_truth(self):
        video = two_instance_video(frame_count=6)
        per_frame = corrupt_detections(video.tracks, 6, DetectorModel())
        for t in range(6):
            expected = [tr for tr in video.tracks if t in tr.masks]
            assert len(per_frame[t]) == len(expected)
            for det, tr in zip(per_frame[t], expected):
                assert det.frame == t
                assert det.category == tr.category
                assert det.score == 1.0
                assert det.box.as_tuple() == tr.boxes[t].as_tuple()
                np.testing.assert_array_equal(det.mask, tr.masks[t])

    def test_miss_rate_one_drops_everything(self):
        video = two_instance_video(frame_count=6)
        per_frame = corrupt_detections(
            video.tracks, 6, DetectorModel(miss_rate=1.0)
        )
        assert all(dets == [] for dets in per_frame)

    def test_never_creates_false_positives(self):
        video = two_instance_video()
        model = DetectorModel(miss_rate=0.3, box_jitter=1.5,
                              score_noise=0.1, seed=3)
        per_frame = corrupt_detections(video.tracks, 24, model)
        gt_count = {
            t: sum(1 for tr in video.tracks if t in tr.masks)
            for t in range(24)
        }
        for t, dets in enumerate(per_frame):
            assert len(dets) <= gt_count[t]

    def test_miss_rate_statistics(self):
        video = two_instance_video()
        total = sum(len(tr.masks) for tr in video.tracks)
        kept = 0
        n_seeds = 50
        for seed in range(n_seeds):
            per_frame = corrupt_detections(
                video.tracks, 24, DetectorModel(miss_rate=0.3, seed=seed)
            )
            kept += sum(len(d) for d in per_frame)
        n = total * n_seeds
        expected = 0.7 * n
        sigma = np.sqrt(n * 0.3 * 0.7)
        assert abs(kept - expected) <= 3 * sigma

    def test_jitter_perturbs_boxes_but_keeps_them_valid(self):
        video = two_instance_video(frame_count=8)
        model = DetectorModel(box_jitter=2.0, seed=5)
        per_frame = corrupt_detections(video.tracks, 8, model)
        moved = 0
        for t, dets in enumerate(per_frame):
            for det in dets:
                assert 0 <= det.box.x1 < det.box.x2 <= 64
                assert 0 <= det.box.y1 < det.box.y2 <= 64
                gt_boxes = [
                    tr.boxes[t].as_tuple() for tr in video.tracks
                    if t in tr.boxes
                ]
                if det.box.as_tuple() not in gt_boxes:
                    moved += 1
        assert moved > 0

    def test_score_noise_stays_in_unit_interval(self):
        video = two_instance_video(frame_count=8)
        model = DetectorModel(score_noise=0.5, seed=2)
        scores = [
            det.score
            for dets in corrupt_detections(video.tracks, 8, model)
            for det in dets
        ]
        assert all(0.0 <= s <= 1.0 for s in scores)
        assert any(s < 1.0 for s in scores)

    def test_mask_erosion_applied_to_detections(self):
        video = two_instance_video(frame_count=4)
        model = DetectorModel(mask_erosion=2, seed=0)
        per_frame = corrupt_detections(video.tracks, 4, model)
        for t, dets in enumerate(per_frame):
            gt = [tr.masks[t] for tr in video.tracks if t in tr.masks]
            assert len(dets) == len(gt)
            for det, mask in zip(dets, gt):
                np.testing.assert_array_equal(det.mask, erode_mask(mask, 2))
                assert det.mask.sum() < mask.sum()

    def test_eroded_to_nothing_is_dropped(self):
        tiny = InstanceSpec(kind="disk", color=RED, start=(32.0, 32.0),
                            size=(2.0,), velocity=(0, 0))
        video = generate_video(make_spec([tiny], frame_count=3))
        per_frame = corrupt_detections(
            video.tracks, 3, DetectorModel(mask_erosion=3)
        )
        assert all(dets == [] for dets in per_frame)

    def test_seed_determinism(self):
        video = two_instance_video(frame_count=8)
        model = DetectorModel(miss_rate=0.3, box_jitter=1.0,
                              score_noise=0.1, seed=9)
        a = corrupt_detections(video.tracks, 8, model)
        b = corrupt_detections(video.tracks, 8, model)
        flat_a = [(d.frame, d.box.as_tuple(), d.score) for f in a for d in f]
        flat_b = [(d.frame, d.box.as_tuple(), d.score) for f in b for d in f]
        assert flat_a == flat_b


class TestRandomScene:
    def test_requested_instance_count(self):
        for n in (1, 3, 6):
            spec = random_scene(4, n_instances=n)
            assert len(spec.instances) == n

    def test_colors_pairwise_distinct(self):
        for seed in range(10):
            spec = random_scene(seed, n_instances=4)
            colors = [inst.color for inst in spec.instances]
            for i in range(len(colors)):
                for j in range(i + 1, len(colors)):
                    gap = max(
                        abs(a - b) for a, b in zip(colors[i], colors[j])
                    )
                    assert gap >= MIN_COLOR_DISTANCE

    def test_determinism(self):
        assert random_scene(21) == random_scene(21)


class TestSuites:
    def test_build_suite_validation(self):
        with pytest.raises(ConfigError):
            build_suite(0, DetectorModel(), n_videos=0)
        with pytest.raises(ConfigError):
            build_suite(0, DetectorModel(), min_instances=4, max_instances=2)

    def test_small_suite_shape(self):
        bundle = build_suite(3, DetectorModel(), n_videos=2, width=64,
                             height=64, frame_count=6, min_instances=1,
                             max_instances=2)
        assert len(bundle.videos) == 2
        assert len(bundle.detections) == 2
        for video, dets in zip(bundle.videos, bundle.detections):
            assert video.frames.shape == (6, 64, 64, 3)
            assert len(dets) == 6
            assert 1 <= len(video.tracks) <= 2

    def test_standard_suite_pins_detector(self):
        bundle = standard_suite(seed=7)
        assert bundle.detector == DetectorModel(
            miss_rate=0.3, box_jitter=1.5, mask_erosion=0,
            score_noise=0.1, seed=7,
        )
        assert bundle.detector.miss_rate == 0.3

    def test_standard_suite_golden_census(self):
        bundle = standard_suite(seed=7)
        assert len(bundle.videos) == 20
        assert bundle.total_instances == 60

    def test_standard_suite_determinism(self):
        a = standard_suite(seed=7)
        b = standard_suite(seed=7)
        for va, vb in zip(a.videos, b.videos):
            np.testing.assert_array_equal(va.frames, vb.frames)
        flat_a = [
            (d.frame, d.box.as_tuple(), d.score)
            for per_video in a.detections for f in per_video for d in f
        ]
        flat_b = [
            (d.frame, d.box.as_tuple(), d.score)
            for per_video in b.detections for f in per_video for d in f
        ]
        assert flat_a == flat_b

    def test_erosion_knob_reaches_detections(self):
        plain = standard_suite(seed=7)
        eroded = standard_suite(seed=7, mask_erosion=2)
        n_plain = sum(
            d.mask.sum()
            for per_video in plain.detections for f in per_video for d in f
        )
        n_eroded = sum(
            d.mask.sum()
            for per_video in eroded.detections for f in per_video for d in f
        )
        assert n_eroded < n_plain
