import math

import numpy as np
import pytest

from optincam.errors import InvalidPolygon
from optincam.geometry import world_to_anchor_polar
from optincam.simulator import (
    CameraNoiseConfig,
    SceneConfig,
    UwbNoiseConfig,
    _is_nlos_epoch,
    default_anchor,
    default_camera,
    generate_scene,
    occlusion_test,
    point_in_polygon,
    simulate_detections,
    simulate_uwb,
)

ANCHOR = default_anchor()


class TestSceneConfig:
    def test_nonconvex_polygon_rejected(self):
        poly = [[0, 0], [4, 0], [1, 1], [0, 4]]
        with pytest.raises(InvalidPolygon):
            SceneConfig(area_polygon=np.array(poly))

    def test_degenerate_polygon_rejected(self):
        with pytest.raises(InvalidPolygon):
            SceneConfig(area_polygon=np.array([[0, 0], [1, 1], [2, 2]]))

    def test_tags_bounded_by_people(self):
        with pytest.raises(ValueError):
            SceneConfig(person_count=2, tag_count=3)


class TestPointInPolygon:
    SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])

    def test_inside_outside(self):
        assert point_in_polygon([0.5, 0.5], self.SQUARE)
        assert not point_in_polygon([1.5, 0.5], self.SQUARE)

    def test_boundary_counts_inside(self):
        assert point_in_polygon([0.0, 0.5], self.SQUARE)
        assert point_in_polygon([0.0, 0.0], self.SQUARE)


class TestGenerateScene:
    def test_positions_stay_in_polygon(self):
        cfg = SceneConfig(person_count=23, tag_count=5, duration_s=60.0, seed=3)
        gt = generate_scene(cfg)
        assert len(gt.persons) == 23
        assert len(gt.tagged) == 5
        for person in gt.persons:
            for t in np.arange(0.0, 60.0, 0.25):
                assert point_in_polygon(person.position(t)[:2], cfg.area_polygon)

    def test_zero_speed_person_stationary(self):
        cfg = SceneConfig(speed_range=(0.0, 0.0), seed=1)
        gt = generate_scene(cfg)
        for person in gt.persons:
            p0 = person.position(0.0)
            for t in (1.0, 5.0, 9.9):
                np.testing.assert_allclose(person.position(t), p0, atol=1e-12)

    def test_seed_determinism(self):
        a = generate_scene(SceneConfig(seed=7))
        b = generate_scene(SceneConfig(seed=7))
        for pa, pb in zip(a.persons, b.persons):
            np.testing.assert_array_equal(pa.waypoints, pb.waypoints)
            np.testing.assert_array_equal(pa.waypoint_times, pb.waypoint_times)
            assert pa.head_width == pb.head_width

    def test_head_width_in_clamp_range(self):
        gt = generate_scene(SceneConfig(person_count=50, tag_count=1, seed=2))
        for p in gt.persons:
            assert 0.24 <= p.head_width <= 0.36

    def test_tag_offset_from_body_axis(self):
        gt = generate_scene(SceneConfig(seed=4))
        person = gt.tagged[0]
        for t in (0.5, 2.0, 7.5):
            d = np.linalg.norm(person.tag_position(t)[:2] - person.position(t)[:2])
            assert d == pytest.approx(0.15, abs=1e-9)
            assert person.tag_position(t)[2] == pytest.approx(1.0)


class TestOcclusion:
    def test_body_between_blocks(self):
        anchor = np.array([0.0, 0.0, 2.0])
        tag = np.array([0.0, 6.0, 1.0])
        body = [(np.array([0.0, 3.0, 0.0]), 0.25, 1.8)]
        assert occlusion_test(anchor, tag, body)

    def test_body_off_axis_clear(self):
        anchor = np.array([0.0, 0.0, 2.0])
        tag = np.array([0.0, 6.0, 1.0])
        body = [(np.array([2.0, 3.0, 0.0]), 0.25, 1.8)]
        assert not occlusion_test(anchor, tag, body)

    def test_body_too_short_clear(self):
        # ray passes above a short obstacle near the anchor end
        anchor = np.array([0.0, 0.0, 3.0])
        tag = np.array([0.0, 6.0, 2.5])
        body = [(np.array([0.0, 1.0, 0.0]), 0.25, 1.0)]
        assert not occlusion_test(anchor, tag, body)

    def test_tag_clearance_excludes_own_sphere(self):
        anchor = np.array([0.0, 0.0, 2.0])
        tag = np.array([0.0, 6.0, 1.0])
        # body centered right at the tag: inside the clearance sphere -> ignored
        body = [(np.array([0.0, 6.0, 0.0]), 0.1, 1.8)]
        assert occlusion_test(anchor, tag, body, tag_clearance=0.05)
        assert not occlusion_test(anchor, tag, body, tag_clearance=1.0)

    def test_matches_dense_sampling_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            anchor = np.array([rng.uniform(-1, 1), rng.uniform(-2, -1), rng.uniform(2, 3)])
            tag = np.array([rng.uniform(-2, 2), rng.uniform(2, 6), 1.0])
            center = np.array([rng.uniform(-2, 2), rng.uniform(0, 6), 0.0])
            radius = rng.uniform(0.1, 0.5)
            height = rng.uniform(1.2, 2.0)

            # oracle: sample 1000 points along the (clearance-trimmed) segment
            seg = tag - anchor
            length = np.linalg.norm(seg)
            end = tag - seg / length * min(0.05, length)
            ts = np.linspace(0, 1, 1000)
            pts = anchor[None, :] + ts[:, None] * (end - anchor)[None, :]
            # distance from each sample point to the axis segment [base, top]
            dz = np.clip(pts[:, 2], 0.0, height)
            radial = np.hypot(pts[:, 0] - center[0], pts[:, 1] - center[1])
            d_axis = np.sqrt(radial**2 + (pts[:, 2] - dz) ** 2)
            oracle = bool(np.min(d_axis) < radius)

            got = occlusion_test(anchor, tag, [(center, radius, height)])
            if oracle != got:
                # dense sampling can miss by a hair at the boundary; only
                # accept disagreement when the true minimum is within 2e-3 of r
                assert abs(np.min(d_axis) - radius) < 2e-3


class TestSimulateUwb:
    def test_zero_noise_exact_polar(self):
        gt = generate_scene(SceneConfig(person_count=1, tag_count=1, seed=6))
        samples, flags = simulate_uwb(gt, ANCHOR, UwbNoiseConfig.zero(), seed=0)
        assert not any(flags)
        person = gt.tagged[0]
        for s in samples:
            z_true = world_to_anchor_polar(person.tag_position(s.timestamp), ANCHOR)
            assert s.z.radial == pytest.approx(z_true.radial, abs=1e-12)
            assert s.z.azimuth == pytest.approx(z_true.azimuth, abs=1e-12)
            assert s.z.elevation == pytest.approx(z_true.elevation, abs=1e-12)

    def test_epoch_count_and_rate(self):
        gt = generate_scene(SceneConfig(person_count=3, tag_count=2, duration_s=10.0, seed=7))
        samples, flags = simulate_uwb(gt, ANCHOR, seed=1)
        assert len(samples) == 2 * 50  # 2 tags x 10 s x 5 Hz
        assert len(flags) == len(samples)
        dts = np.diff([s.timestamp for s in samples[:50]])
        np.testing.assert_allclose(dts, 0.2, atol=1e-9)

    def test_seed_determinism(self):
        gt = generate_scene(SceneConfig(seed=8))
        a, fa = simulate_uwb(gt, ANCHOR, seed=5)
        b, fb = simulate_uwb(gt, ANCHOR, seed=5)
        assert fa == fb
        for sa, sb in zip(a, b):
            assert sa.z == sb.z
            np.testing.assert_array_equal(sa.features, sb.features)

    def test_forced_nlos_rate_matches_flags(self):
        gt = generate_scene(SceneConfig(person_count=1, tag_count=1, duration_s=200.0, seed=9))
        noise = UwbNoiseConfig(forced_nlos_rate=0.3, occlusion_enabled=False)
        _, flags = simulate_uwb(gt, ANCHOR, noise, seed=2)
        rate = np.mean(flags)
        assert abs(rate - 0.3) < 0.05

    def test_flags_match_geometric_oracle(self):
        gt = generate_scene(SceneConfig(person_count=8, tag_count=1, seed=10))
        samples, flags = simulate_uwb(gt, ANCHOR, UwbNoiseConfig(), seed=3)
        person = gt.tagged[0]
        for s, f in zip(samples, flags):
            assert f == _is_nlos_epoch(gt, person, ANCHOR, s.timestamp)

    def test_crowding_increases_nlos_fraction(self):
        light = generate_scene(SceneConfig(person_count=2, tag_count=1, duration_s=60.0, seed=11))
        dense = generate_scene(SceneConfig(person_count=23, tag_count=1, duration_s=60.0, seed=11))
        _, f_light = simulate_uwb(light, ANCHOR, seed=4)
        _, f_dense = simulate_uwb(dense, ANCHOR, seed=4)
        assert np.mean(f_dense) > np.mean(f_light)


class TestSimulateDetections:
    def setup_method(self):
        self.intr, self.extr = default_camera()

    def test_zero_noise_projection_exact(self):
        from optincam.geometry import project_to_pixel

        gt = generate_scene(SceneConfig(person_count=1, tag_count=1, seed=12))
        dets, sidecar = simulate_detections(gt, self.intr, self.extr, CameraNoiseConfig.zero(), seed=0)
        person = gt.persons[0]
        for d in dets:
            head = person.position(d.timestamp) + np.array([0, 0, person.head_height])
            proj = project_to_pixel(head, self.intr, self.extr)
            u, v, depth = proj
            assert d.u == pytest.approx(u, abs=1e-9)
            assert d.v == pytest.approx(v, abs=1e-9)
            assert d.w_p == pytest.approx(self.intr.f_x * person.head_width / depth, abs=1e-9)

    def test_frame_clock_subset(self):
        gt = generate_scene(SceneConfig(seed=13))
        dets, _ = simulate_detections(gt, self.intr, self.extr, seed=1)
        frame_ts = set(np.round(np.arange(0.0, 10.0, 0.1), 6))
        assert {d.timestamp for d in dets} <= frame_ts

    def test_sidecar_aligns_with_detections(self):
        gt = generate_scene(SceneConfig(seed=14))
        dets, sidecar = simulate_detections(gt, self.intr, self.extr, seed=2)
        assert len(dets) == len(sidecar)
        for d, s in zip(dets, sidecar):
            assert d.timestamp == s["t"]
            assert d.tracklet_id == s["tracklet_id"]
        carried = {s["carries_tag"] for s in sidecar}
        assert "tag00" in carried

    def test_gap_starts_new_tracklet(self):
        gt = generate_scene(SceneConfig(person_count=1, tag_count=1, seed=15))
        noise = CameraNoiseConfig.zero()
        dets, sidecar = simulate_detections(gt, self.intr, self.extr, noise, seed=3)
        # drop a 1-second chunk and re-run the id bookkeeping via fragmentation:
        # instead verify directly that within one run, each person's tracklet ids
        # only move forward and a same-person timestamp gap >= 0.5 s implies a new id
        by_person = {}
        for s in sidecar:
            by_person.setdefault(s["person_id"], []).append((s["t"], s["tracklet_id"]))
        for rows in by_person.values():
            for (t0, id0), (t1, id1) in zip(rows, rows[1:]):
                if t1 - t0 >= 0.5:
                    assert id1 != id0

    def test_id_switches_fragment_tracklets(self):
        gt = generate_scene(SceneConfig(person_count=1, tag_count=1, duration_s=60.0, seed=16))
        heavy = CameraNoiseConfig(center_std_px=0.0, width_std_px=0.0, id_switch_rate=2.0)
        dets, _ = simulate_detections(gt, self.intr, self.extr, heavy, seed=4)
        n_ids = len({d.tracklet_id for d in dets})
        assert n_ids > 10

    def test_seed_determinism(self):
        gt = generate_scene(SceneConfig(seed=17))
        a, _ = simulate_detections(gt, self.intr, self.extr, seed=5)
        b, _ = simulate_detections(gt, self.intr, self.extr, seed=5)
        assert len(a) == len(b)
        for da, db in zip(a, b):
            assert (da.timestamp, da.tracklet_id, da.u, da.v, da.w_p, da.h_p) == (
                db.timestamp,
                db.tracklet_id,
                db.u,
                db.v,
                db.w_p,
                db.h_p,
            )
