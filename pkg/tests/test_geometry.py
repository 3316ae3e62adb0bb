import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from auvhoming.geometry import (
    Pose3,
    bearing_boxminus,
    bearing_boxplus,
    euler_zyx_from_rotation,
    pose_local_update,
    rot_from_heading,
    rotation_from_euler_zyx,
    se3_exp,
    se3_log,
    skew,
    so3_exp,
    so3_log,
    sphere_tangent_basis,
    unit,
    wrap_angle,
)

RNG = np.random.default_rng(1234)


def random_pose(rng):
    return Pose3(so3_exp(rng.normal(size=3)), rng.normal(scale=5.0, size=3))


def assert_pose_close(a, b, tol=1e-9):
    assert np.linalg.norm(a.rotation - b.rotation) < tol
    assert np.linalg.norm(a.translation - b.translation) < tol


class TestSe3Exp:
    def test_zero_gives_identity(self):
        assert_pose_close(se3_exp(np.zeros(6)), Pose3.identity())

    def test_pure_translation(self):
        p = se3_exp(np.array([0, 0, 0, 1.0, 2.0, 3.0]))
        assert np.allclose(p.rotation, np.eye(3))
        assert np.allclose(p.translation, [1.0, 2.0, 3.0])

    def test_small_rotation_matches_first_order(self):
        p = se3_exp(np.array([1e-4, 0, 0, 0, 0, 0]))
        first_order = np.eye(3) + skew(np.array([1e-4, 0, 0]))
        assert np.max(np.abs(p.rotation - first_order)) < 1e-8

    def test_rotation_is_orthonormal(self):
        for _ in range(50):
            p = se3_exp(RNG.normal(size=6))
            assert np.linalg.norm(p.rotation @ p.rotation.T - np.eye(3)) < 1e-9
            assert abs(np.linalg.det(p.rotation) - 1.0) < 1e-9

    def test_matrix_log_oracle_recovers_tangent(self):
        # oracle: dense matrix logarithm of the homogeneous transform
        for _ in range(30):
            xi = RNG.uniform(-0.5, 0.5, size=6)
            T = se3_exp(xi).matrix()
            log_T = scipy.linalg.logm(T)
            recovered = np.concatenate(
                [[log_T[2, 1], log_T[0, 2], log_T[1, 0]], log_T[:3, 3]]
            )
            assert np.linalg.norm(recovered.real - xi) < 1e-8

    def test_se3_log_roundtrip(self):
        for _ in range(30):
            xi = RNG.uniform(-1.0, 1.0, size=6)
            assert np.linalg.norm(se3_log(se3_exp(xi)) - xi) < 1e-9


class TestPoseOps:
    def test_compose_inverse_is_identity(self):
        for _ in range(50):
            p = random_pose(RNG)
            assert_pose_close(p.compose(p.inverse()), Pose3.identity())

    def test_local_update_zero_increment(self):
        q = random_pose(RNG)
        assert_pose_close(pose_local_update(q, np.zeros(6)), q)

    def test_local_update_identity_base(self):
        xi = RNG.normal(scale=0.3, size=6)
        assert_pose_close(pose_local_update(Pose3.identity(), xi), se3_exp(xi))

    def test_local_update_roundtrip(self):
        for _ in range(50):
            q = random_pose(RNG)
            xi = RNG.uniform(-0.1, 0.1, size=6)
            back = pose_local_update(pose_local_update(q, xi), -xi)
            assert np.linalg.norm(back.rotation - q.rotation) < 1e-6
            assert np.linalg.norm(back.translation - q.translation) < 1e-6


class TestHeadingRotation:
    def test_zero_heading(self):
        assert np.allclose(rot_from_heading(0.0), np.eye(3))

    def test_quarter_turn(self):
        assert np.allclose(rot_from_heading(math.pi / 2) @ [1, 0, 0], [0, 1, 0])

    def test_eighth_turn(self):
        v = rot_from_heading(math.pi / 4) @ [1, 0, 0]
        assert np.allclose(v, [math.sqrt(2) / 2, math.sqrt(2) / 2, 0])

    def test_euler_roundtrip(self):
        for _ in range(30):
            yaw, pitch, roll = RNG.uniform(-1.4, 1.4, size=3)
            R = rotation_from_euler_zyx(yaw, pitch, roll)
            assert np.allclose(euler_zyx_from_rotation(R), (yaw, pitch, roll))


class TestBearingBoxminus:
    def test_coincident(self):
        a = np.array([0.0, 0.0, 1.0])
        assert np.array_equal(bearing_boxminus(a, a), np.zeros(2))

    def test_orthogonal(self):
        d = bearing_boxminus(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
        assert abs(np.linalg.norm(d) - math.pi / 2) < 1e-12

    def test_antipodal_boundary(self):
        d = bearing_boxminus(np.array([0, 0, -1.0]), np.array([0, 0, 1.0]))
        assert np.allclose(d, [math.pi, 0.0])

    def test_angle_oracle(self):
        for _ in range(200):
            a = unit(RNG.normal(size=3))
            b = unit(RNG.normal(size=3))
            angle = math.acos(np.clip(np.dot(a, b), -1, 1))
            assert abs(np.linalg.norm(bearing_boxminus(a, b)) - angle) < 1e-10

    def test_boxminus_self_is_exactly_zero(self):
        for _ in range(20):
            a = unit(RNG.normal(size=3))
            assert np.array_equal(bearing_boxminus(a, a), np.zeros(2))

    def test_boxplus_inverts_boxminus(self):
        for _ in range(100):
            a = unit(RNG.normal(size=3))
            b = unit(RNG.normal(size=3))
            d = bearing_boxminus(a, b)
            if np.linalg.norm(d) > math.pi - 1e-6:
                continue
            assert np.linalg.norm(bearing_boxplus(b, d) - a) < 1e-10

    def test_tangent_basis_orthonormal(self):
        for b in [unit(RNG.normal(size=3)) for _ in range(20)] + [
            np.array([0.0, 0.0, 1.0]),
            np.array([0.0, 0.0, -1.0]),
        ]:
            e_az, e_zen = sphere_tangent_basis(b)
            G = np.array([e_az, e_zen, b])
            assert np.linalg.norm(G @ G.T - np.eye(3)) < 1e-12


class TestWrapAngle:
    def test_three_half_pi(self):
        assert abs(wrap_angle(3 * math.pi / 2) - (-math.pi / 2)) < 1e-12

    def test_negative_pi_wraps_to_pi(self):
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)

    def test_seven(self):
        assert wrap_angle(7.0) == pytest.approx(7.0 - 2 * math.pi)

    @given(st.floats(min_value=-1e6, max_value=1e6))
    def test_idempotent_and_in_range(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert wrap_angle(w) == w

    @given(st.floats(min_value=-50.0, max_value=50.0))
    def test_congruent_mod_two_pi(self, a):
        w = wrap_angle(a)
        assert abs(math.remainder(a - w, 2 * math.pi)) < 1e-9


class TestSo3Log:
    def test_roundtrip(self):
        # canonical branch: roundtrip holds for |w| < pi
        for _ in range(100):
            w = unit(RNG.normal(size=3)) * RNG.uniform(0.0, math.pi - 1e-3)
            assert np.linalg.norm(so3_log(so3_exp(w)) - w) < 1e-8

    def test_near_pi(self):
        w = unit(RNG.normal(size=3)) * (math.pi - 1e-8)
        R = so3_exp(w)
        assert np.linalg.norm(so3_exp(so3_log(R)) - R) < 1e-6
