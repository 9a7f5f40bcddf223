import numpy as np
import pytest

from graspwarp.cpd import DeformationField, apply_deformation, kernel_matrix
from graspwarp.errors import DegenerateDeformationError, ValidationError
from graspwarp.geometry import (
    PointCloud,
    RigidParams,
    axis_angle_quat,
    quat_to_matrix,
    rotation_angle_between,
)
from graspwarp.transfer import (
    CANONICAL,
    OBSERVED,
    ControlPose,
    GraspDescriptor,
    SamplingParams,
    axis_cone_predicate,
    descriptor_from_dict,
    descriptor_to_dict,
    descriptor_to_observed,
    filter_constraints,
    flatten_descriptor,
    infer_descriptor,
    inverse_deform,
    load_descriptor,
    pose_to_canonical,
    random_quaternion,
    sample_grasp_motion,
    save_descriptor,
    to_robot_frame,
    train_regressor,
    warp_pose,
)


def _smooth_field(rng, m=60, beta=0.4, magnitude=0.002):
    canonical = PointCloud(rng.normal(size=(m, 3)) * 0.15)
    W = rng.normal(size=(m, 3)) * magnitude
    return DeformationField(canonical, W, beta)


def _translation_field(canonical, t, beta=0.5):
    """Weights whose displacement equals t exactly at every canonical point."""
    G = kernel_matrix(canonical, canonical, beta)
    W = np.linalg.solve(G, np.tile(t, (len(canonical), 1)))
    return DeformationField(canonical, W, beta)


def _random_pose(rng, label="grasp"):
    return ControlPose(
        rng.normal(size=3) * 0.1,
        quat_to_matrix(axis_angle_quat(rng.normal(size=3), rng.uniform(0, np.pi))),
        label,
    )


class TestWarpPose:
    def test_identity_field_and_rigid(self, rng):
        field = DeformationField.identity(PointCloud(rng.normal(size=(10, 3))), 0.5)
        pose = _random_pose(rng)
        out = warp_pose(field, RigidParams(), pose)
        assert np.abs(out.position - pose.position).max() < 1e-9
        assert np.abs(out.orientation - pose.orientation).max() < 1e-9
        assert out.label == pose.label

    def test_rigid_only_premultiplies(self, rng):
        field = DeformationField.identity(PointCloud(rng.normal(size=(10, 3))), 0.5)
        pose = _random_pose(rng)
        theta = RigidParams(axis_angle_quat([0, 0, 1], 0.8), np.array([0.1, 0.0, -0.2]))
        out = warp_pose(field, theta, pose)
        R = theta.rotation_matrix()
        assert np.abs(out.position - (R @ pose.position + theta.translation)).max() < 1e-9
        assert np.abs(out.orientation - R @ pose.orientation).max() < 1e-9

    def test_warped_orientation_stays_orthonormal(self, rng):
        for _ in range(60):
            field = _smooth_field(rng)
            pose = _random_pose(rng)
            out = warp_pose(field, RigidParams(), pose)
            R = out.orientation
            assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(R) - 1.0) < 1e-9

    def test_collapsing_field_raises(self):
        # single-point field tuned so the x and y axis endpoints deform onto
        # the same image: the warped frame loses a dimension exactly
        eps = 1e-4
        beta = 0.1
        center = np.array([0.01, 0.002, 0.0])
        z1 = eps * np.array([1.0, 0.0, 0.0])
        z2 = eps * np.array([0.0, 1.0, 0.0])

        def g(z):
            return np.exp(-np.sum((z - center) ** 2) / (2 * beta * beta))

        W = ((z2 - z1) / (g(z1) - g(z2)))[None, :]
        field = DeformationField(PointCloud(center[None, :]), W, beta)
        pose = ControlPose(np.zeros(3), np.eye(3))
        with pytest.raises(DegenerateDeformationError):
            warp_pose(field, RigidParams(), pose, eps=eps)


class TestInverseDeform:
    def test_identity_field_returns_input(self, rng):
        field = DeformationField.identity(PointCloud(rng.normal(size=(12, 3))), 0.5)
        o = np.array([0.1, -0.2, 0.05])
        out = inverse_deform(field, o, field.canonical)
        assert np.abs(out - o).max() < 1e-12

    def test_constant_translation_inverted_exactly(self, rng):
        canonical = PointCloud(rng.normal(size=(15, 3)) * 0.2)
        t = np.array([0.03, -0.01, 0.02])
        field = _translation_field(canonical, t)
        z = canonical.points[4]
        moved = apply_deformation(field, z[None, :])[0]
        back = inverse_deform(field, moved, field.canonical)
        assert np.abs(back - z).max() < 1e-12

    def test_round_trip_on_smooth_fields(self, rng):
        errors = []
        for _ in range(20):
            field = _smooth_field(rng, m=80, magnitude=0.002)
            pts = field.canonical.points[:20]
            moved = apply_deformation(field, pts)
            back = np.array([inverse_deform(field, o, field.canonical) for o in moved])
            errors.append(np.linalg.norm(back - pts, axis=1).mean())
        assert float(np.mean(errors)) < 0.005

    def test_far_query_raises(self, rng):
        canonical = PointCloud(rng.normal(size=(10, 3)) * 0.1)
        field = DeformationField(canonical, rng.normal(size=(10, 3)) * 0.01, 0.05)
        with pytest.raises(DegenerateDeformationError):
            inverse_deform(field, np.array([10.0, 10.0, 10.0]), canonical)

    def test_single_support_point(self, rng):
        canonical = PointCloud(rng.normal(size=(10, 3)) * 0.2)
        field = DeformationField(canonical, rng.normal(size=(10, 3)) * 0.01, 0.6)
        z1 = canonical.points[2]
        v1 = apply_deformation(field, z1[None, :])[0] - z1
        o = rng.normal(size=3) * 0.1
        out = inverse_deform(field, o, z1[None, :])
        assert np.abs(out - (o - v1)).max() < 1e-12


class TestPoseToCanonical:
    def test_identity_field(self, rng):
        field = DeformationField.identity(PointCloud(rng.normal(size=(12, 3))), 0.5)
        pose = _random_pose(rng)
        out = pose_to_canonical(field, pose)
        assert np.abs(out.position - pose.position).max() < 1e-9
        assert np.abs(out.orientation - pose.orientation).max() < 1e-9

    def test_round_trip_with_warp(self, rng):
        for _ in range(10):
            field = _smooth_field(rng, m=80, magnitude=0.0015)
            pose = ControlPose(
                field.canonical.points[5],
                quat_to_matrix(axis_angle_quat(rng.normal(size=3), rng.uniform(0, 2.0))),
            )
            warped = warp_pose(field, RigidParams(), pose)
            back = pose_to_canonical(field, warped)
            assert np.linalg.norm(back.position - pose.position) < 0.005
            assert rotation_angle_between(back.orientation, pose.orientation) < np.radians(2.0)


class TestRandomQuaternion:
    def test_zero_inputs_closed_form(self):
        q = random_quaternion(0.0, 0.0, 0.0)
        assert np.abs(q - np.array([0.0, 1.0, 0.0, 0.0])).max() < 1e-15

    def test_unit_norm(self, rng):
        for _ in range(200):
            q = random_quaternion(*rng.random(3))
            assert abs(np.linalg.norm(q) - 1.0) < 1e-12

    def test_input_range_checked(self):
        with pytest.raises(ValidationError):
            random_quaternion(1.5, 0.0, 0.0)


class TestSampleGraspMotion:
    def _motion(self, rng, n=3):
        return GraspDescriptor(tuple(_random_pose(rng, f"p{i}") for i in range(n)), CANONICAL)

    def test_default_bounds(self):
        params = SamplingParams()
        assert params.max_translation == 0.04
        assert params.max_angle == 0.2

    def test_degenerate_bounds_reproduce_input(self, rng):
        motion = self._motion(rng)
        params = SamplingParams(
            max_translation=1e-9, max_angle=1e-9, translation_stddev=1e-10, seed=3
        )
        out = sample_grasp_motion(motion, params)
        for a, b in zip(out.poses, motion.poses):
            assert np.abs(a.position - b.position).max() < 1e-6
            assert rotation_angle_between(a.orientation, b.orientation) < 1e-6

    def test_bounds_respected_and_spread_matches(self, rng):
        motion = GraspDescriptor((_random_pose(rng),), CANONICAL)
        params = SamplingParams(seed=11)
        master = np.random.default_rng(11)
        offsets = []
        angles = []
        for _ in range(1000):
            out = sample_grasp_motion(motion, params, master)
            offsets.append(out.poses[0].position - motion.poses[0].position)
            angles.append(
                rotation_angle_between(out.poses[0].orientation, motion.poses[0].orientation)
            )
        offsets = np.array(offsets)
        angles = np.array(angles)
        assert (np.linalg.norm(offsets, axis=1) <= params.max_translation + 1e-12).all()
        assert (angles <= params.max_angle + 1e-9).all()
        # Monte-Carlo oracle for the stddev of the norm-truncated normal
        oracle = np.random.default_rng(77).normal(0.0, params.translation_stddev, (200_000, 3))
        oracle = oracle[np.linalg.norm(oracle, axis=1) <= params.max_translation]
        assert np.abs(offsets.std(axis=0) - oracle.std(axis=0)).max() < 0.1 * oracle.std()

    def test_reproducible_for_fixed_seed(self, rng):
        motion = self._motion(rng)
        params = SamplingParams(seed=42)
        a = sample_grasp_motion(motion, params)
        b = sample_grasp_motion(motion, params)
        for pa, pb in zip(a.poses, b.poses):
            assert np.array_equal(pa.position, pb.position)
            assert np.array_equal(pa.orientation, pb.orientation)

    def test_inconsistent_translation_bounds_raise(self, rng):
        motion = self._motion(rng, n=1)
        params = SamplingParams(max_translation=1e-9, translation_stddev=1.0, seed=0)
        with pytest.raises(ValidationError, match="inconsistent"):
            sample_grasp_motion(motion, params)


class TestFilterConstraints:
    def test_empty_predicates_pass(self, rng):
        motion = GraspDescriptor((_random_pose(rng),), CANONICAL)
        assert filter_constraints(motion, []) is True

    def test_axis_cone(self):
        down = ControlPose(np.zeros(3), quat_to_matrix(axis_angle_quat([1, 0, 0], np.pi)))
        up = ControlPose(np.zeros(3), np.eye(3))
        pred = axis_cone_predicate([0, 0, -1], np.radians(30.0))
        assert filter_constraints(GraspDescriptor((down,), CANONICAL), [pred]) is True
        assert filter_constraints(GraspDescriptor((up,), CANONICAL), [pred]) is False

    def test_matches_brute_force(self, rng):
        preds = [
            axis_cone_predicate([0, 0, -1], np.radians(60.0)),
            lambda pose: pose.position[0] > -0.5,
        ]
        for _ in range(25):
            motion = GraspDescriptor(
                tuple(_random_pose(rng) for _ in range(3)), CANONICAL
            )
            want = all(p(pose) for pose in motion.poses for p in preds)
            assert filter_constraints(motion, preds) == want


def _linear_descriptor(x, labels):
    """Deterministic descriptor whose flattened form is linear in x (len 3)."""
    poses = []
    for j, label in enumerate(labels):
        pos = np.array([0.1 * j + 0.05 * x[0], 0.03 * x[1], -0.02 * x[2]])
        poses.append(ControlPose(pos, np.eye(3), label))
    return GraspDescriptor(tuple(poses), CANONICAL)


class TestRegressor:
    def test_constant_targets_give_bias_only(self, rng):
        target = GraspDescriptor((_random_pose(rng, "a"), _random_pose(rng, "b")), CANONICAL)
        latents = [rng.normal(size=3) for _ in range(6)]
        reg = train_regressor(latents, [target] * 6, ridge=0.0)
        assert np.abs(reg.weights[:3]).max() < 1e-9
        predicted = infer_descriptor(reg, rng.normal(size=3))
        for pa, pb in zip(predicted.poses, target.poses):
            assert np.abs(pa.position - pb.position).max() < 1e-9
            assert rotation_angle_between(pa.orientation, pb.orientation) < 1e-6

    def test_realizable_linear_targets_fit_exactly(self, rng):
        labels = ("pre", "grasp")
        latents = [rng.normal(size=3) for _ in range(8)]
        descs = [_linear_descriptor(x, labels) for x in latents]
        reg = train_regressor(latents, descs, ridge=0.0)
        assert reg.residual < 1e-8

    def test_ridge_shrinks_weights_monotonically(self, rng):
        labels = ("pre", "grasp")
        latents = [rng.normal(size=3) for _ in range(8)]
        descs = [_linear_descriptor(x, labels) for x in latents]
        norms = []
        for ridge in (0.0, 1e-3, 1e-1):
            reg = train_regressor(latents, descs, ridge=ridge)
            norms.append(np.linalg.norm(reg.weights[:3]))
        assert norms[0] >= norms[1] >= norms[2]
        assert norms[2] < norms[0]

    def test_training_latent_recovers_its_descriptor(self, rng):
        labels = ("pre", "grasp")
        latents = [rng.normal(size=3) for _ in range(8)]
        descs = [_linear_descriptor(x, labels) for x in latents]
        reg = train_regressor(latents, descs, ridge=0.0)
        predicted = infer_descriptor(reg, latents[2])
        want = flatten_descriptor(descs[2], reference=descs[0])
        got = flatten_descriptor(predicted, reference=descs[0])
        assert np.abs(got - want).max() < 1e-7

    def test_zero_latent_predicts_bias(self, rng):
        labels = ("pre",)
        latents = [rng.normal(size=3) for _ in range(6)]
        descs = [_linear_descriptor(x, labels) for x in latents]
        reg = train_regressor(latents, descs, ridge=0.0)
        predicted = infer_descriptor(reg, np.zeros(3))
        assert np.abs(flatten_descriptor(predicted) - reg.weights[3]).max() < 1e-6

    def test_predicted_quaternions_unit_norm(self, rng):
        latents = [rng.normal(size=2) for _ in range(5)]
        descs = [
            GraspDescriptor((_random_pose(rng, "g"),), CANONICAL) for _ in range(5)
        ]
        reg = train_regressor(latents, descs, ridge=1e-6)
        for _ in range(20):
            predicted = infer_descriptor(reg, rng.normal(size=2) * 2.0)
            for pose in predicted.poses:
                R = pose.orientation
                assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9

    def test_validation(self, rng):
        good = GraspDescriptor((_random_pose(rng),), CANONICAL)
        observed = GraspDescriptor((_random_pose(rng),), OBSERVED)
        with pytest.raises(ValidationError, match="canonical"):
            train_regressor([np.zeros(2), np.zeros(2)], [good, observed])
        with pytest.raises(ValidationError, match="one descriptor per"):
            train_regressor([np.zeros(2)], [good, good])
        long = GraspDescriptor((_random_pose(rng), _random_pose(rng)), CANONICAL)
        with pytest.raises(ValidationError, match="mixed pose counts"):
            train_regressor([np.zeros(2), np.zeros(2)], [good, long])


class TestSpaceChanges:
    def test_identity_transfer(self, rng):
        field = DeformationField.identity(PointCloud(rng.normal(size=(10, 3))), 0.5)
        desc = GraspDescriptor((_random_pose(rng),), CANONICAL)
        out = descriptor_to_observed(desc, field, RigidParams())
        assert out.space_tag == OBSERVED
        assert np.abs(out.poses[0].position - desc.poses[0].position).max() < 1e-9

    def test_rigid_only_preserves_relative_pose(self, rng):
        field = DeformationField.identity(PointCloud(rng.normal(size=(10, 3))), 0.5)
        desc = GraspDescriptor((_random_pose(rng, "a"), _random_pose(rng, "b")), CANONICAL)
        theta = RigidParams(axis_angle_quat([1, 1, 0], 0.7), np.array([0.2, -0.1, 0.4]))
        out = descriptor_to_observed(desc, field, theta)

        def relative(d):
            a, b = d.poses
            return a.orientation.T @ b.orientation, a.orientation.T @ (b.position - a.position)

        Ra, ta = relative(desc)
        Rb, tb = relative(out)
        assert np.abs(Ra - Rb).max() < 1e-9
        assert np.abs(ta - tb).max() < 1e-9

    def test_wrong_tag_rejected(self, rng):
        field = DeformationField.identity(PointCloud(rng.normal(size=(5, 3))), 0.5)
        observed = GraspDescriptor((_random_pose(rng),), OBSERVED)
        with pytest.raises(ValidationError):
            descriptor_to_observed(observed, field, RigidParams())
        canonical = GraspDescriptor((_random_pose(rng),), CANONICAL)
        with pytest.raises(ValidationError):
            to_robot_frame(canonical, RigidParams())


class TestToRobotFrame:
    def test_identity(self, rng):
        desc = GraspDescriptor((_random_pose(rng),), OBSERVED)
        out = to_robot_frame(desc, RigidParams())
        assert np.abs(out.poses[0].position - desc.poses[0].position).max() < 1e-12

    def test_pure_translation(self, rng):
        desc = GraspDescriptor((_random_pose(rng),), OBSERVED)
        t = np.array([0.5, -0.25, 1.0])
        out = to_robot_frame(desc, RigidParams(translation=t))
        assert np.abs(out.poses[0].position - desc.poses[0].position - t).max() < 1e-12
        assert np.abs(out.poses[0].orientation - desc.poses[0].orientation).max() < 1e-12

    def test_composition_associativity(self, rng):
        desc = GraspDescriptor((_random_pose(rng), _random_pose(rng)), OBSERVED)
        a = RigidParams(axis_angle_quat([0, 1, 0], 0.4), np.array([0.1, 0.0, 0.0]))
        b = RigidParams(axis_angle_quat([1, 0, 1], 1.1), np.array([-0.2, 0.3, 0.05]))
        stacked = to_robot_frame(to_robot_frame(desc, a), b)
        composed = to_robot_frame(desc, b.compose(a))
        for pa, pb in zip(stacked.poses, composed.poses):
            assert np.abs(pa.position - pb.position).max() < 1e-9
            assert np.abs(pa.orientation - pb.orientation).max() < 1e-9


class TestSerialization:
    def test_dict_round_trip(self, rng):
        desc = GraspDescriptor((_random_pose(rng, "pre"), _random_pose(rng, "g")), OBSERVED)
        back = descriptor_from_dict(descriptor_to_dict(desc))
        assert back.space_tag == OBSERVED
        for pa, pb in zip(back.poses, desc.poses):
            assert pa.label == pb.label
            assert np.abs(pa.position - pb.position).max() < 1e-12
            assert rotation_angle_between(pa.orientation, pb.orientation) < 1e-9

    def test_file_round_trip(self, rng, tmp_path):
        desc = GraspDescriptor((_random_pose(rng, "grasp"),), CANONICAL)
        path = tmp_path / "grasp.json"
        save_descriptor(desc, path)
        back = load_descriptor(path)
        assert back.space_tag == CANONICAL
        assert back.poses[0].label == "grasp"

    def test_malformed_document_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"poses": "nope"}')
        with pytest.raises(ValidationError):
            load_descriptor(path)


class TestPoseValidation:
    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValidationError):
            ControlPose(np.zeros(3), np.eye(3) * 1.01)

    def test_reflection_rejected(self):
        R = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValidationError):
            ControlPose(np.zeros(3), R)

    def test_descriptor_needs_poses(self):
        with pytest.raises(ValidationError):
            GraspDescriptor((), CANONICAL)

    def test_bad_space_tag(self, rng):
        with pytest.raises(ValidationError):
            GraspDescriptor((_random_pose(rng),), "elsewhere")
