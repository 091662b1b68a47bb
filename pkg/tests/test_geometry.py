import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optincam.errors import BadBox, DegeneratePoint
from optincam.geometry import (
    AnchorPose,
    CameraExtrinsics,
    CameraIntrinsics,
    HeadDetection,
    anchor_polar_to_world,
    head_box_to_world,
    look_at_extrinsics,
    rotation_zyx,
    world_to_anchor_polar,
    wrap_angle,
)

IDENTITY_POSE = AnchorPose(position=np.zeros(3), orientation=np.zeros(3))

angles = st.floats(-math.pi, math.pi)
coords = st.floats(-20.0, 20.0)


def make_pose(px, py, pz, a, b, c):
    return AnchorPose(position=np.array([px, py, pz]), orientation=np.array([a, b, c]))


class TestWorldToAnchorPolar:
    def test_boresight_point(self):
        z = world_to_anchor_polar(np.array([1.0, 0.0, 0.0]), IDENTITY_POSE)
        assert z.radial == pytest.approx(1.0)
        assert z.azimuth == pytest.approx(0.0)
        assert z.elevation == pytest.approx(0.0)

    def test_zero_range_raises(self):
        with pytest.raises(DegeneratePoint):
            world_to_anchor_polar(np.zeros(3), IDENTITY_POSE)

    def test_identity_pose_matches_spherical_conversion(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            p = rng.uniform(-5, 5, 3)
            if np.linalg.norm(p) < 1e-6:
                continue
            z = world_to_anchor_polar(p, IDENTITY_POSE)
            r = np.linalg.norm(p)
            assert z.radial == pytest.approx(r)
            assert z.azimuth == pytest.approx(math.atan2(p[1], p[0]))
            assert z.elevation == pytest.approx(math.asin(p[2] / r))

    def test_table_pose_against_composition_oracle(self):
        # oracle: compose Rz, Ry, Rx and the polar conversion step by step
        pose = make_pose(0.29, -3.29, 2.57, 3.14, 0.28, 1.56)
        p = np.zeros(3)

        yaw, pitch, roll = pose.orientation
        rz = np.array(
            [
                [math.cos(yaw), -math.sin(yaw), 0],
                [math.sin(yaw), math.cos(yaw), 0],
                [0, 0, 1],
            ]
        )
        ry = np.array(
            [
                [math.cos(pitch), 0, math.sin(pitch)],
                [0, 1, 0],
                [-math.sin(pitch), 0, math.cos(pitch)],
            ]
        )
        rx = np.array(
            [
                [1, 0, 0],
                [0, math.cos(roll), -math.sin(roll)],
                [0, math.sin(roll), math.cos(roll)],
            ]
        )
        local = (rz @ ry @ rx).T @ (p - pose.position)
        r = np.linalg.norm(local)
        expected = (r, math.atan2(local[1], local[0]), math.asin(local[2] / r))

        z = world_to_anchor_polar(p, pose)
        assert z.radial == pytest.approx(expected[0], abs=1e-12)
        assert z.azimuth == pytest.approx(expected[1], abs=1e-12)
        assert z.elevation == pytest.approx(expected[2], abs=1e-12)


class TestAnchorPolarToWorld:
    def test_unit_boresight(self):
        p = anchor_polar_to_world(
            world_to_anchor_polar(np.array([1.0, 0, 0]), IDENTITY_POSE), IDENTITY_POSE
        )
        np.testing.assert_allclose(p, [1, 0, 0], atol=1e-12)

    def test_quarter_turn_azimuth(self):
        from optincam.geometry import PolarMeasurement

        p = anchor_polar_to_world(PolarMeasurement(2.0, math.pi / 2, 0.0), IDENTITY_POSE)
        np.testing.assert_allclose(p, [0, 2, 0], atol=1e-12)

    def test_round_trip_many_random_pairs(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            pose = make_pose(*rng.uniform(-5, 5, 3), *rng.uniform(-math.pi, math.pi, 3))
            p = rng.uniform(-10, 10, 3)
            if np.linalg.norm(p - pose.position) < 1e-3:
                continue
            z = world_to_anchor_polar(p, pose)
            back = anchor_polar_to_world(z, pose)
            np.testing.assert_allclose(back, p, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(
    px=coords, py=coords, pz=coords,
    a=angles, b=angles, c=angles,
    x=coords, y=coords, z=coords,
)
def test_round_trip_property(px, py, pz, a, b, c, x, y, z):
    pose = make_pose(px, py, pz, a, b, c)
    p = np.array([x, y, z])
    if np.linalg.norm(p - pose.position) < 1e-3:
        return
    back = anchor_polar_to_world(world_to_anchor_polar(p, pose), pose)
    np.testing.assert_allclose(back, p, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(a=angles, b=angles, c=angles)
def test_rotation_orthonormal(a, b, c):
    R = rotation_zyx([a, b, c])
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_wrap_angle_range():
    for a in [-10.0, -math.pi, -1.0, 0.0, 1.0, math.pi, 10.0, 2 * math.pi]:
        w = float(wrap_angle(a))
        assert -math.pi < w <= math.pi
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-12)
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-12)


class TestHeadBoxToWorld:
    INTR = CameraIntrinsics(f_x=600.0, f_y=600.0, c_x=640.0, c_y=360.0)

    def test_depth_formula(self):
        # camera at origin looking down +x: world +x is camera +z
        extr = look_at_extrinsics(np.zeros(3), np.array([1.0, 0, 0]))
        det = HeadDetection(0.0, "t0", u=640.0, v=360.0, w_p=60.0)
        p = head_box_to_world(det, self.INTR, extr, w_r=0.30)
        assert np.linalg.norm(p) == pytest.approx(3.0)  # d = 600 * 0.30 / 60

    def test_zero_width_raises(self):
        det = HeadDetection(0.0, "t0", u=0.0, v=0.0, w_p=0.0)
        with pytest.raises(BadBox):
            head_box_to_world(det, self.INTR, look_at_extrinsics(np.zeros(3), np.array([1.0, 0, 0])), 0.3)

    def test_projection_oracle(self):
        # camera 2 m above ground at origin, looking down +x
        cam_pos = np.array([0.0, 0.0, 2.0])
        extr = look_at_extrinsics(cam_pos, cam_pos + np.array([1.0, 0, 0]))
        # pixel center, w_p chosen so d = 2
        det = HeadDetection(0.0, "t0", u=640.0, v=360.0, w_p=600.0 * 0.30 / 2.0)
        p = head_box_to_world(det, self.INTR, extr, w_r=0.30)
        # oracle: 2 m along the optical axis (+x world) from the camera center
        np.testing.assert_allclose(p, [2.0, 0.0, 2.0], atol=1e-9)

    def test_depth_inverse_in_width(self):
        extr = look_at_extrinsics(np.zeros(3), np.array([1.0, 0, 0]))
        det1 = HeadDetection(0.0, "t", u=700.0, v=300.0, w_p=40.0)
        det2 = HeadDetection(0.0, "t", u=700.0, v=300.0, w_p=80.0)
        p1 = head_box_to_world(det1, self.INTR, extr, 0.3)
        p2 = head_box_to_world(det2, self.INTR, extr, 0.3)
        assert np.linalg.norm(p1) == pytest.approx(2 * np.linalg.norm(p2))


def test_extrinsics_validation():
    with pytest.raises(ValueError):
        CameraExtrinsics(rotation=np.eye(3) * 2.0, translation=np.zeros(3))
    # reflection: orthonormal but det -1
    R = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        CameraExtrinsics(rotation=R, translation=np.zeros(3))
