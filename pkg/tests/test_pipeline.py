import math

import numpy as np
import pytest

from optincam.errors import ClockSkew, DimensionMismatch, MissingGroundTruth
from optincam.matching import build_cost_matrix, overlap_matrix, solve_assignment
from optincam.pipeline import (
    FrameDecision,
    METRICS_CSV_HEADER,
    ReplayConfig,
    compose_mask,
    detections_to_tracklets,
    evaluate_recall,
    metrics_csv_row,
    pr_auc,
    run_replay,
    sweep_threshold,
    _filter_tags,
)
from optincam.simulator import (
    CameraNoiseConfig,
    SceneConfig,
    UwbNoiseConfig,
    default_anchor,
    default_camera,
    generate_scene,
    simulate_detections,
    simulate_uwb,
)
from optincam.tracking import NoiseModel


def make_config(**overrides) -> ReplayConfig:
    intr, extr = default_camera()
    base = dict(
        anchor=default_anchor(),
        intrinsics=intr,
        extrinsics=extr,
        noise=NoiseModel.hand_designed(),
        w_r=0.30,
        h_tag=1.0,
    )
    base.update(overrides)
    return ReplayConfig(**base)


def zero_noise_run(seed=0, person_count=5, duration_s=10.0):
    gt = generate_scene(
        SceneConfig(person_count=person_count, tag_count=1, duration_s=duration_s, seed=seed)
    )
    samples, _ = simulate_uwb(gt, default_anchor(), UwbNoiseConfig.zero(), seed=seed)
    intr, extr = default_camera()
    dets, sidecar = simulate_detections(gt, intr, extr, CameraNoiseConfig.zero(), seed=seed)
    return samples, dets, sidecar


class TestRunReplay:
    def test_zero_noise_perfect_recall(self):
        samples, dets, sidecar = zero_noise_run(seed=0)
        decisions, metrics = run_replay(samples, dets, make_config(), sidecar)
        assert metrics.recall == 1.0
        assert metrics.misidentification_count == 0

    def test_deterministic_replay(self):
        samples, dets, sidecar = zero_noise_run(seed=1)
        cfg = make_config()
        d1, m1 = run_replay(samples, dets, cfg, sidecar)
        d2, m2 = run_replay(samples, dets, cfg, sidecar)
        assert d1 == d2
        assert m1.recall == m2.recall
        assert m1.misid_rate == m2.misid_rate

    def test_single_window_equals_batch_solution(self):
        # stream fully inside one window: per-frame keep decisions must equal
        # the one-shot assignment over the full cost matrix
        samples, dets, _ = zero_noise_run(seed=2, duration_s=8.0)
        cfg = make_config(window_s=10.0)
        decisions, _ = run_replay(samples, dets, cfg)

        trajectories = _filter_tags(samples, cfg)
        tag_ids = sorted(trajectories)
        tracklets = detections_to_tracklets(dets, cfg)
        trk_ids = sorted(tracklets)
        cm = build_cost_matrix(
            [trajectories[t] for t in tag_ids],
            [tracklets[t] for t in trk_ids],
            cfg.align_tolerance,
        )
        ov = overlap_matrix([tracklets[t] for t in trk_ids])
        res = solve_assignment(cm, ov, cfg.c_th)
        batch = {
            trk_ids[j]: tag_ids[i]
            for i in range(len(tag_ids))
            for j in range(len(trk_ids))
            if res.x[i, j]
        }
        for dec in decisions:
            for tag, tid, _box, keep in dec.assignments:
                if keep:
                    assert batch.get(tid) == tag
                else:
                    assert batch.get(tid) is None

    def test_clock_skew_raises(self):
        samples, dets, _ = zero_noise_run(seed=3)
        shuffled = [dets[-1]] + dets[:-1]
        with pytest.raises(ClockSkew):
            run_replay(samples, shuffled, make_config())

    def test_empty_detections(self):
        samples, _, _ = zero_noise_run(seed=4)
        decisions, metrics = run_replay(samples, [], make_config())
        assert decisions == [] and metrics is None

    def test_windows_partition_frames(self):
        samples, dets, _ = zero_noise_run(seed=5)
        decisions, _ = run_replay(samples, dets, make_config(window_s=2.0))
        frame_ts = sorted({round(d.timestamp, 6) for d in dets})
        assert [d.timestamp for d in decisions] == frame_ts


class TestEvaluateRecall:
    def make_decision(self, t, rows):
        return FrameDecision(timestamp=t, assignments=rows, unmatched=[])

    def test_hand_computed_recall(self):
        # carrier visible in 50 frames, kept correctly in 43 -> recall 0.86
        gt = []
        decisions = []
        for k in range(50):
            t = 0.1 * k
            gt.append({"t": t, "tracklet_id": "trk0", "person_id": "p0", "carries_tag": "tag00"})
            keep = k < 43
            rows = [("tag00", "trk0", (0, 0, 10, 10), True)] if keep else [("", "trk0", (0, 0, 10, 10), False)]
            decisions.append(self.make_decision(t, rows))
        metrics = evaluate_recall(decisions, gt)
        assert metrics.recall == pytest.approx(0.86)
        assert metrics.misidentification_count == 0
        assert metrics.frames_visible == 50

    def test_misidentification_counted(self):
        gt = [
            {"t": 0.0, "tracklet_id": "trk0", "person_id": "p0", "carries_tag": "tag00"},
            {"t": 0.0, "tracklet_id": "trk1", "person_id": "p1", "carries_tag": None},
        ]
        decisions = [self.make_decision(0.0, [("tag00", "trk1", (0, 0, 1, 1), True)])]
        metrics = evaluate_recall(decisions, gt)
        assert metrics.recall == 0.0
        assert metrics.misidentification_count == 1
        assert metrics.misid_rate == 1.0

    def test_per_tag_recall(self):
        gt = [
            {"t": 0.0, "tracklet_id": "a", "person_id": "p0", "carries_tag": "tag00"},
            {"t": 0.0, "tracklet_id": "b", "person_id": "p1", "carries_tag": "tag01"},
        ]
        decisions = [
            self.make_decision(
                0.0,
                [("tag00", "a", (0, 0, 1, 1), True), ("", "b", (0, 0, 1, 1), False)],
            )
        ]
        metrics = evaluate_recall(decisions, gt)
        assert metrics.per_tag_recall["tag00"] == 1.0
        assert metrics.per_tag_recall["tag01"] == 0.0
        assert metrics.recall == pytest.approx(0.5)

    def test_empty_ground_truth_raises(self):
        with pytest.raises(MissingGroundTruth):
            evaluate_recall([], [])


class TestSweepAndAuc:
    def test_sweep_requires_two_values(self):
        samples, dets, sidecar = zero_noise_run(seed=6)
        with pytest.raises(ValueError):
            sweep_threshold(samples, dets, sidecar, make_config(), [1.5])

    def test_sweep_rows_and_recall_monotone(self):
        samples, dets, sidecar = zero_noise_run(seed=6)
        rows = sweep_threshold(samples, dets, sidecar, make_config(), [0.1, 0.5, 1.5, 3.0])
        assert [r["c_th"] for r in rows] == [0.1, 0.5, 1.5, 3.0]
        recalls = [r["recall"] for r in rows]
        assert all(b >= a - 1e-12 for a, b in zip(recalls, recalls[1:]))

    def test_pr_auc_known_trapezoid(self):
        rows = [
            {"misid_rate": 0.0, "recall": 0.0},
            {"misid_rate": 0.5, "recall": 1.0},
            {"misid_rate": 1.0, "recall": 1.0},
        ]
        assert pr_auc(rows) == pytest.approx(0.75)

    def test_pr_auc_degenerate(self):
        rows = [{"misid_rate": 0.2, "recall": 0.5}, {"misid_rate": 0.2, "recall": 0.7}]
        assert pr_auc(rows) == 0.0


class TestComposeMask:
    def test_no_keeps_returns_background(self):
        rng = np.random.default_rng(0)
        frame = rng.integers(0, 256, (20, 30, 3), dtype=np.uint8)
        bg = rng.integers(0, 256, (20, 30, 3), dtype=np.uint8)
        dec = FrameDecision(0.0, [("", "trk0", (5, 5, 4, 4), False)], ["trk0"])
        np.testing.assert_array_equal(compose_mask(frame, bg, dec), bg)

    def test_kept_box_pixels_from_frame(self):
        frame = np.full((20, 30, 3), 200, dtype=np.uint8)
        bg = np.zeros((20, 30, 3), dtype=np.uint8)
        dec = FrameDecision(0.0, [("tag00", "trk0", (10.0, 8.0, 6.0, 4.0), True)], [])
        out = compose_mask(frame, bg, dec)
        assert int((out == 200).all(axis=2).sum()) == 6 * 4
        np.testing.assert_array_equal(out[6:10, 7:13], 200)

    def test_box_clamped_to_image(self):
        frame = np.full((10, 10, 3), 50, dtype=np.uint8)
        bg = np.zeros((10, 10, 3), dtype=np.uint8)
        dec = FrameDecision(0.0, [("tag00", "trk0", (0.0, 0.0, 8.0, 8.0), True)], [])
        out = compose_mask(frame, bg, dec)
        assert int((out == 50).all(axis=2).sum()) == 4 * 4

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionMismatch):
            compose_mask(
                np.zeros((4, 4, 3), dtype=np.uint8),
                np.zeros((5, 4, 3), dtype=np.uint8),
                FrameDecision(0.0, [], []),
            )


class TestMetricsCsv:
    def test_header_and_row_align(self):
        from optincam.pipeline import RunMetrics

        metrics = RunMetrics(
            recall=0.86,
            misidentification_count=3,
            misid_rate=0.01,
            frames_total=100,
            frames_visible=90,
            mean_latency_ms=1.234,
        )
        row = metrics_csv_row("scene0", 8, 1, make_config(c_th=1.5, u_th=1.5), metrics)
        assert len(row.split(",")) == len(METRICS_CSV_HEADER.split(","))
        assert row == "scene0,8,1,1.5,1.5,0.860000,0.010000,1.234"
