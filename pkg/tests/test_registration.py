"""Rigid transforms, Euler conversions, Kabsch, ICP and coarse alignment."""

import numpy as np
import pytest

from plantscan.cloud import PointCloud
from plantscan.errors import AlignmentError, EstimationError, ValidationError
from plantscan.registration import (RigidTransform, euler_zyx_to_matrix, icp,
                                    kabsch, matrix_to_euler_zyx, ransac_align,
                                    register_scans)
from plantscan.synth import sample_reference


def random_rotation(rng):
    return euler_zyx_to_matrix(rng.uniform(-179, 179), rng.uniform(-89, 89),
                               rng.uniform(-179, 179))


class TestRigidTransform:
    def test_identity_is_noop(self):
        pts = np.random.default_rng(0).uniform(0, 1, (10, 3))
        np.testing.assert_array_equal(RigidTransform.identity().apply(pts), pts)

    def test_rejects_improper_rotation(self):
        with pytest.raises(ValidationError):
            RigidTransform(R=np.diag([1.0, 1.0, -1.0]))
        with pytest.raises(ValidationError):
            RigidTransform(R=np.eye(3) * 2.0)

    def test_compose_equals_sequential_application(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 1, (20, 3))
        a = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3), 1.3)
        b = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3), 0.8)
        np.testing.assert_allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)),
                                   atol=1e-12)

    def test_inverse_round_trips(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(-1, 1, (20, 3))
        tf = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3), 1.7)
        np.testing.assert_allclose(tf.inverse().apply(tf.apply(pts)), pts,
                                   atol=1e-12)


class TestEulerConversion:
    def test_round_trip_many_rotations(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            R = random_rotation(rng)
            roll, pitch, yaw = matrix_to_euler_zyx(R)
            np.testing.assert_allclose(euler_zyx_to_matrix(roll, pitch, yaw), R,
                                       atol=1e-9)

    def test_known_axis_rotations(self):
        assert matrix_to_euler_zyx(euler_zyx_to_matrix(30, 0, 0)) == \
            pytest.approx((30, 0, 0), abs=1e-12)
        assert matrix_to_euler_zyx(euler_zyx_to_matrix(0, 40, 0)) == \
            pytest.approx((0, 40, 0), abs=1e-12)
        assert matrix_to_euler_zyx(euler_zyx_to_matrix(0, 0, -120)) == \
            pytest.approx((0, 0, -120), abs=1e-12)

    def test_gimbal_lock_still_reproduces_matrix(self):
        R = euler_zyx_to_matrix(25, 90, 40)
        roll, pitch, yaw = matrix_to_euler_zyx(R)
        assert yaw == 0.0
        np.testing.assert_allclose(euler_zyx_to_matrix(roll, pitch, yaw), R,
                                   atol=1e-9)

    def test_angles_wrap_into_half_open_range(self):
        roll, _, _ = matrix_to_euler_zyx(euler_zyx_to_matrix(180.0, 0, 0))
        assert roll == 180.0


class TestKabsch:
    def test_recovers_known_transform(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            src = rng.uniform(-1, 1, (12, 3))
            truth = RigidTransform(random_rotation(rng), rng.uniform(-2, 2, 3))
            est = kabsch(src, truth.apply(src))
            np.testing.assert_allclose(est.R, truth.R, atol=1e-9)
            np.testing.assert_allclose(est.t, truth.t, atol=1e-9)

    def test_recovers_scale_when_requested(self):
        rng = np.random.default_rng(5)
        src = rng.uniform(-1, 1, (15, 3))
        truth = RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3), 1.6)
        est = kabsch(src, truth.apply(src), with_scale=True)
        assert est.s == pytest.approx(1.6, abs=1e-9)

    def test_is_least_squares_optimal_under_noise(self):
        # perturbing the solution must not lower the residual
        rng = np.random.default_rng(6)
        src = rng.uniform(-1, 1, (40, 3))
        tgt = src @ random_rotation(rng).T + rng.normal(0, 0.01, (40, 3))
        est = kabsch(src, tgt)
        base = np.sum((est.apply(src) - tgt) ** 2)
        for _ in range(20):
            jig = RigidTransform(euler_zyx_to_matrix(*rng.uniform(-0.5, 0.5, 3)),
                                 rng.uniform(-0.01, 0.01, 3))
            assert np.sum((jig.compose(est).apply(src) - tgt) ** 2) >= base - 1e-12

    def test_rejects_degenerate_geometry(self):
        line = np.outer(np.arange(5.0), [1.0, 0, 0])
        with pytest.raises(EstimationError):
            kabsch(line, line)

    def test_rejects_too_few_points(self):
        with pytest.raises(ValidationError):
            kabsch(np.zeros((2, 3)), np.zeros((2, 3)))


class TestIcp:
    def test_converges_from_small_offset(self):
        cloud = sample_reference("car", 300)
        init = RigidTransform(euler_zyx_to_matrix(2, -1, 3), [0.05, -0.04, 0.02])
        tf, rms, history = icp(cloud, cloud, init=init)
        assert rms < 1e-6
        np.testing.assert_allclose(tf.R, np.eye(3), atol=1e-5)
        np.testing.assert_allclose(tf.t, 0.0, atol=1e-5)

    def test_rms_history_is_monotone_non_increasing(self):
        rng = np.random.default_rng(7)
        cloud = sample_reference("hanger", 300)
        noisy = PointCloud(cloud.points + rng.normal(0, 0.002, cloud.points.shape))
        for seed in range(5):
            r = np.random.default_rng(seed)
            init = RigidTransform(euler_zyx_to_matrix(*r.uniform(-5, 5, 3)),
                                  r.uniform(-0.1, 0.1, 3))
            _, _, history = icp(cloud, noisy, init=init)
            assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))

    def test_rejects_tiny_clouds(self):
        c = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValidationError):
            icp(c, c)


class TestRansacAlign:
    def test_recovers_known_pose(self):
        rng = np.random.default_rng(8)
        ref = sample_reference("car", 400)
        truth = RigidTransform(euler_zyx_to_matrix(0, 0, 35.0), [1.2, -0.7, 0.4])
        target = PointCloud(truth.apply(ref.points))
        coarse, frac = ransac_align(ref, target, n_iter=1024, seed=0)
        tf, rms, _ = icp(ref, target, init=coarse)
        assert frac > 0.5
        assert rms < 1e-6
        np.testing.assert_allclose(tf.apply(ref.points), target.points, atol=1e-4)

    def test_raises_on_unrelated_clouds(self):
        rng = np.random.default_rng(9)
        ref = sample_reference("car", 200)
        scatter = PointCloud(rng.uniform(0, 50, (400, 3)))
        with pytest.raises(AlignmentError):
            ransac_align(ref, scatter, n_iter=256, seed=0,
                         min_inlier_fraction=0.5)

    def test_rejects_tiny_clouds(self):
        c = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValidationError):
            ransac_align(c, c)


class TestRegisterScans:
    def test_two_shifted_scans_chain_into_anchor_frame(self):
        ref = sample_reference("car", 300)
        shift = RigidTransform(euler_zyx_to_matrix(0, 0, 20.0), [0.8, 0.3, 0.1])
        scans = [ref, PointCloud(shift.apply(ref.points))]
        tfs = register_scans(scans, anchor=0, seed=0)
        np.testing.assert_array_equal(tfs[0].R, np.eye(3))
        np.testing.assert_allclose(tfs[1].apply(scans[1].points), ref.points,
                                   atol=1e-3)

    def test_rejects_empty_list_and_bad_anchor(self):
        with pytest.raises(ValidationError):
            register_scans([])
        with pytest.raises(ValidationError):
            register_scans([sample_reference("clutter", 200)], anchor=2)
