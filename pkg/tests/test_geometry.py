import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpnr import geometry as geo
from gpnr.checks import check_canonicalization, check_epipolar, random_camera

EYE = np.eye(3)


def unit_intr(width=3, height=3):
    return geo.CameraIntrinsics(1.0, 1.0, 0.0, 0.0, width, height)


@pytest.fixture
def camera(rng):
    return random_camera(rng)


class TestTypes:
    @pytest.mark.parametrize("fx, fy, w, h", [(0.0, 1.0, 4, 4), (1.0, -1.0, 4, 4), (1.0, 1.0, 0, 4), (1.0, 1.0, 4, 0)])
    def test_intrinsics_validation(self, fx, fy, w, h):
        with pytest.raises(ValueError):
            geo.CameraIntrinsics(fx, fy, 0.0, 0.0, w, h)

    def test_from_fov_centers_principal_point(self):
        intr = geo.CameraIntrinsics.from_fov(32, 16, 90.0)
        assert intr.fx == pytest.approx(16.0)
        assert (intr.cx, intr.cy) == (15.5, 7.5)

    def test_look_at_is_rotation(self, rng):
        for _ in range(20):
            pose = geo.CameraPose.look_at(rng.normal(size=3), rng.normal(size=3) + 5)
            pose.check(1e-12)

    def test_look_at_axis(self):
        pose = geo.CameraPose.look_at([1.0, 2.0, 3.0], [1.0, 2.0, 10.0])
        np.testing.assert_allclose(pose.R[2], [0, 0, 1], atol=1e-15)
        np.testing.assert_allclose(pose.center, [1, 2, 3], atol=1e-15)

    def test_look_at_degenerate(self):
        with pytest.raises(ValueError):
            geo.CameraPose.look_at([0, 0, 0], [0, 0, 0])

    def test_check_rejects_reflection(self):
        with pytest.raises(ValueError):
            geo.CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).check()

    def test_ray_normalizes(self):
        assert np.linalg.norm(geo.Ray([0, 0, 0], [3.0, 4.0, 0.0]).direction) == pytest.approx(1.0, abs=1e-15)

    def test_similarity_scale_positive(self):
        with pytest.raises(ValueError):
            geo.SimilarityTransform(0.0)


class TestCameraCenter:
    def test_identity(self):
        np.testing.assert_array_equal(geo.camera_center(geo.CameraPose(EYE, np.zeros(3))), 0.0)

    def test_translation(self):
        np.testing.assert_array_equal(geo.camera_center(geo.CameraPose(EYE, [0, 0, -5.0])), [0, 0, 5])

    def test_center_projects_to_zero_depth(self, camera):
        pose, intr = camera
        _, z = geo.project_points(pose.R, pose.t, intr, pose.center)
        assert abs(z) < 1e-12


class TestPixelToRay:
    def test_principal_point(self):
        intr = geo.CameraIntrinsics(10.0, 10.0, 4.0, 3.0, 8, 6)
        ray = geo.pixel_to_ray(geo.CameraPose(EYE, np.zeros(3)), intr, [4.0, 3.0])
        np.testing.assert_allclose(ray.direction, [0, 0, 1])

    def test_unit_intrinsics(self):
        ray = geo.pixel_to_ray(geo.CameraPose(EYE, np.zeros(3)), unit_intr(), [1.0, 0.0])
        np.testing.assert_allclose(ray.direction, np.array([1, 0, 1]) / np.sqrt(2), rtol=1e-15)

    def test_translation_moves_origin_only(self):
        base = geo.pixel_to_ray(geo.CameraPose(EYE, np.zeros(3)), unit_intr(), [0.3, -0.2])
        moved = geo.pixel_to_ray(geo.CameraPose(EYE, [1.0, 2.0, 3.0]), unit_intr(), [0.3, -0.2])
        np.testing.assert_array_equal(moved.direction, base.direction)
        np.testing.assert_array_equal(moved.origin, [-1, -2, -3])

    def test_projects_back_to_pixel(self, camera, rng):
        pose, intr = camera
        pix = rng.uniform(0, 31, size=2)
        ray = geo.pixel_to_ray(pose, intr, pix)
        back, z = geo.project_points(pose.R, pose.t, intr, ray.at(2.5))
        np.testing.assert_allclose(back, pix, atol=1e-10)
        assert z > 0


class TestPlucker:
    def test_through_origin(self):
        p = geo.to_plucker(geo.Ray([0, 0, 0], [0, 0, 1]))
        np.testing.assert_array_equal(p.as_vector(), [0, 0, 1, 0, 0, 0])

    def test_offset_origin(self):
        p = geo.to_plucker(geo.Ray([1.0, 0, 0], [0, 0, 1.0]))
        np.testing.assert_array_equal(p.m, [0, -1, 0])

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(st.floats(-10, 10), min_size=3, max_size=3),
        st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1),
        st.floats(-50, 50),
    )
    def test_slide_along_ray(self, o, v, lam):
        ray = geo.Ray(o, v)
        a = geo.to_plucker(ray)
        b = geo.to_plucker(geo.Ray(ray.at(lam), ray.direction))
        np.testing.assert_allclose(b.as_vector(), a.as_vector(), atol=1e-9)
        assert abs(a.d @ a.m) < 1e-7


class TestCanonicalization:
    def test_forward_ray_is_identity(self):
        intr = geo.CameraIntrinsics(10.0, 10.0, 4.0, 4.0, 9, 9)
        T = geo.canonicalizing_transform(geo.CameraPose(EYE, np.zeros(3)), intr, [4.0, 4.0])
        np.testing.assert_allclose(T.R, EYE, atol=1e-15)
        np.testing.assert_allclose(T.t, 0.0, atol=1e-15)

    def test_sideways_ray_frame(self):
        Rc = geo.canonical_rotation(np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
        np.testing.assert_allclose(Rc, np.array([[0, 0, -1], [0, 1, 0], [1, 0, 0]]).T, atol=1e-15)
        np.testing.assert_allclose(Rc.T @ [1.0, 0, 0], [0, 0, 1], atol=1e-15)

    def test_degenerate_raises_without_fallback(self):
        with pytest.raises(geo.DegenerateAxisError):
            geo.canonical_rotation(np.array([0, 1.0, 0]), np.array([0, 1.0, 0]))

    def test_degenerate_uses_fallback(self):
        Rc = geo.canonical_rotation(np.array([0, 1.0, 0]), np.array([0, 1.0, 0]), np.array([1.0, 0, 0]))
        np.testing.assert_allclose(Rc.T @ Rc, EYE, atol=1e-15)
        np.testing.assert_allclose(Rc[:, 2], [0, 1, 0])

    def test_property_suite(self, rng):
        for result in check_canonicalization(rng, trials=500):
            assert result.ok, result.line()

    def test_batched_matches_single(self, camera, rng):
        pose, intr = camera
        pix = rng.uniform(0, 31, size=(5, 2))
        v = geo.pixel_directions(pose.R, intr, pix)
        batched = geo.canonical_rotation(v, pose.R[1], pose.R[0])
        for i in range(5):
            T = geo.canonicalizing_transform(pose, intr, pix[i])
            np.testing.assert_allclose(batched[i].T, T.R, atol=1e-15)


class TestRigidPose:
    def test_identity(self, camera):
        pose, _ = camera
        out = geo.apply_rigid_to_pose(geo.RigidTransform(), pose)
        np.testing.assert_array_equal(out.R, pose.R)
        np.testing.assert_array_equal(out.t, pose.t)

    def test_inverse_round_trip(self, camera, rng):
        pose, _ = camera
        T = geo.RigidTransform(geo.random_rotation(rng), rng.normal(size=3))
        back = geo.apply_rigid_to_pose(T.inverse(), geo.apply_rigid_to_pose(T, pose))
        np.testing.assert_allclose(back.R, pose.R, atol=1e-9)
        np.testing.assert_allclose(back.t, pose.t, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_commutes_with_pixel_to_ray(self, seed):
        rng = np.random.default_rng(seed)
        pose, intr = random_camera(rng)
        T = geo.RigidTransform(geo.random_rotation(rng), rng.normal(size=3))
        pix = rng.uniform(0, 31, size=2)
        a = geo.pixel_to_ray(geo.apply_rigid_to_pose(T, pose), intr, pix)
        b = T.apply_ray(geo.pixel_to_ray(pose, intr, pix))
        np.testing.assert_allclose(a.origin, b.origin, atol=1e-12)
        np.testing.assert_allclose(a.direction, b.direction, atol=1e-12)


class TestSimilarity:
    @pytest.fixture
    def rig(self):
        poses = [geo.CameraPose.look_at([x, 0.0, 0.0], [0.0, 0.0, 5.0]) for x in (-1.0, 0.0, 2.0)]
        return poses, 1.0, 8.0

    def test_identity(self, rig):
        poses, near, far = rig
        out, n2, f2 = geo.apply_similarity(geo.SimilarityTransform(), poses, near, far)
        assert (n2, f2) == (near, far)
        for a, b in zip(out, poses):
            np.testing.assert_allclose(a.R, b.R)
            np.testing.assert_allclose(a.t, b.t)

    def test_pure_scale(self, rig):
        poses, near, far = rig
        out, _, f2 = geo.apply_similarity(geo.SimilarityTransform(2.0), poses, near, far)
        assert f2 == 2 * far
        for a, b in zip(out, poses):
            np.testing.assert_allclose(a.center, 2 * b.center, atol=1e-15)

    def test_distances_scale(self, rig, rng):
        poses, near, far = rig
        sim = geo.SimilarityTransform.random(rng)
        out, _, _ = geo.apply_similarity(sim, poses, near, far)
        for i in range(3):
            for j in range(i):
                d0 = np.linalg.norm(poses[i].center - poses[j].center)
                d1 = np.linalg.norm(out[i].center - out[j].center)
                assert d1 == pytest.approx(sim.s * d0, rel=1e-12)

    def test_moved_poses_are_rotations(self, rig, rng):
        poses, near, far = rig
        out, _, _ = geo.apply_similarity(geo.SimilarityTransform.random(rng), poses, near, far)
        for pose in out:
            pose.check(1e-12)

    def test_random_scale_range(self, rng):
        scales = [geo.SimilarityTransform.random(rng).s for _ in range(200)]
        assert 0.1 <= min(scales) and max(scales) <= 10.0


class TestSampleDepths:
    @pytest.mark.parametrize(
        "near, far, m, want",
        [(1, 3, 3, [1, 2, 3]), (1, 3, 1, [2]), (2, 10, 5, [2, 4, 6, 8, 10])],
    )
    def test_examples(self, near, far, m, want):
        np.testing.assert_allclose(geo.sample_depths(near, far, m), want)

    @pytest.mark.parametrize("near, far", [(3.0, 3.0), (4.0, 1.0), (0.0, 1.0)])
    def test_bad_bounds(self, near, far):
        with pytest.raises(ValueError):
            geo.sample_depths(near, far, 4)


class TestEpipolar:
    def test_self_projection(self, camera, rng):
        pose, intr = camera
        pix = rng.uniform(0, 31, size=2)
        ray = geo.pixel_to_ray(pose, intr, pix)
        for depth in (0.5, 2.0, 9.0):
            out, valid = geo.epipolar_project(ray, depth, pose, intr)
            np.testing.assert_allclose(out, pix, atol=1e-9)
            assert valid

    def test_behind_camera_invalid(self):
        intr = geo.CameraIntrinsics(10.0, 10.0, 4.0, 4.0, 9, 9)
        ray = geo.Ray([0.0, 0.0, -5.0], [0, 0, 1])
        _, valid = geo.epipolar_project(ray, 1.0, geo.CameraPose(EYE, np.zeros(3)), intr)
        assert not valid

    @pytest.mark.parametrize("baseline, depth", [(0.5, 2.0), (0.1, 7.0), (1.0, 3.3)])
    def test_stereo_disparity(self, baseline, depth):
        intr = geo.CameraIntrinsics(20.0, 20.0, 16.0, 16.0, 32, 32)
        left = geo.CameraPose(EYE, np.zeros(3))
        right = geo.CameraPose(EYE, [-baseline, 0.0, 0.0])  # center at +baseline on x
        ray = geo.pixel_to_ray(left, intr, [16.0, 16.0])
        pix, _ = geo.epipolar_project(ray, depth, right, intr)
        assert 16.0 - pix[0] == pytest.approx(intr.fx * baseline / depth, rel=1e-12)
        assert pix[1] == pytest.approx(16.0)

    def test_validity_margin(self):
        intr = geo.CameraIntrinsics(10.0, 10.0, 0.0, 0.0, 8, 8)
        ident = geo.CameraPose(EYE, np.zeros(3))
        # u = 10 x / z; the image spans [-0.5, 7.5], grown by p / 2 = 1.5
        for u, want in ((8.9, True), (9.1, False), (-1.9, True), (-2.1, False)):
            ray = geo.Ray([u / 10, 0.0, 0.0], [0, 0, 1])
            _, valid = geo.epipolar_project(ray, 1.0, ident, intr, patch_size=3)
            assert bool(valid) is want, u

    def test_property_suite(self, rng):
        result = check_epipolar(rng, trials=500)
        assert result.ok, result.line()


class TestSelectViews:
    @pytest.fixture
    def line_rig(self):
        return [geo.CameraPose(EYE, [-float(x), 0.0, 0.0]) for x in range(8)]

    def test_k_equals_n(self, line_rig, rng):
        a = geo.select_reference_views(line_rig, line_rig[3], 4, 4, "infer", exclude=3)
        b = geo.select_reference_views(line_rig, line_rig[3], 4, 4, "train", rng=rng, exclude=3)
        assert sorted(a) == sorted(b) == [1, 2, 4, 5]

    def test_infer_nearest_adjacent(self, line_rig):
        got = geo.select_reference_views(line_rig, line_rig[5], 6, 3, "infer", exclude=5)
        assert list(got) == [4, 6, 3]

    def test_target_excluded(self, line_rig):
        got = geo.select_reference_views(line_rig, line_rig[0], 7, 7, "infer", exclude=0)
        assert 0 not in got and len(got) == 7

    def test_train_reproducible(self, line_rig):
        picks = [
            geo.select_reference_views(line_rig, line_rig[4], 6, 3, "train", rng=np.random.default_rng(9), exclude=4)
            for _ in range(2)
        ]
        np.testing.assert_array_equal(*picks)

    def test_train_within_pool(self, line_rig, rng):
        pool = set(geo.select_reference_views(line_rig, line_rig[4], 4, 4, "infer", exclude=4))
        for _ in range(30):
            assert set(geo.select_reference_views(line_rig, line_rig[4], 4, 2, "train", rng=rng, exclude=4)) <= pool

    def test_angle_metric(self):
        poses = [geo.CameraPose.look_at([0, 0, 0], d) for d in ([0, 0, 1], [0.1, 0, 1], [1, 0, 1], [0, 0.5, 1])]
        got = geo.select_reference_views(poses, poses[0], 3, 3, "infer", exclude=0, metric="angle")
        assert list(got) == [1, 3, 2]

    @pytest.mark.parametrize("n, k", [(2, 3), (3, 0)])
    def test_bad_counts(self, line_rig, n, k):
        with pytest.raises(ValueError):
            geo.select_reference_views(line_rig, line_rig[0], n, k)

    def test_too_few_candidates(self, line_rig):
        with pytest.raises(ValueError, match="candidate"):
            geo.select_reference_views(line_rig[:3], line_rig[0], 3, 3, exclude=0)

    def test_train_needs_rng(self, line_rig):
        with pytest.raises(ValueError):
            geo.select_reference_views(line_rig, line_rig[0], 4, 2, "train")
