"""Rigid transforms and pinhole projection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxelweave.camera import PinholeCamera, RigidTransform, look_at, rotation_about
from voxelweave.errors import ContractError, DegenerateProjection


def make_camera(**kw):
    defaults = dict(fx=64.0, fy=64.0, cx=31.5, cy=31.5, width=64, height=64)
    defaults.update(kw)
    return PinholeCamera(**defaults)


class TestRigidTransform:
    def test_identity_fixes_points(self, rng):
        pts = rng.normal(size=(10, 3))
        np.testing.assert_array_equal(RigidTransform.identity().apply(pts), pts)

    def test_compose_then_inverse_roundtrip(self, rng):
        t = rotation_about("y", 0.7).compose(
            RigidTransform(np.eye(3), np.array([1.0, -2.0, 0.5])))
        pts = rng.normal(size=(6, 3))
        back = t.inverse().apply(t.apply(pts))
        np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_rotation_preserves_lengths(self, rng):
        r = rotation_about("x", 1.2)
        pts = rng.normal(size=(20, 3))
        np.testing.assert_allclose(np.linalg.norm(r.apply(pts), axis=1),
                                   np.linalg.norm(pts, axis=1), rtol=1e-12)

    def test_non_orthonormal_rotation_rejected(self):
        with pytest.raises(ContractError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))

    def test_json_roundtrip(self):
        t = rotation_about("z", 0.3).compose(
            RigidTransform(np.eye(3), np.array([0.1, 0.2, 0.3])))
        back = RigidTransform.from_json(t.to_json())
        np.testing.assert_allclose(back.rotation, t.rotation, atol=1e-15)
        np.testing.assert_allclose(back.translation, t.translation, atol=1e-15)


class TestLookAt:
    def test_target_lands_on_optical_axis(self):
        eye = np.array([0.4, -0.8, -1.0])
        target = np.array([0.0, -0.18, 0.0])
        t = look_at(eye, target)
        cam = t.apply(target[None])[0]
        assert cam[0] == pytest.approx(0.0, abs=1e-12)
        assert cam[1] == pytest.approx(0.0, abs=1e-12)
        assert cam[2] == pytest.approx(np.linalg.norm(target - eye), rel=1e-12)

    def test_eye_maps_to_origin(self):
        eye = np.array([1.0, 2.0, 3.0])
        t = look_at(eye, np.zeros(3))
        np.testing.assert_allclose(t.apply(eye[None])[0], 0.0, atol=1e-12)

    def test_degenerate_view_direction_rejected(self):
        with pytest.raises(ContractError):
            look_at(np.zeros(3), np.zeros(3))


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        cam = make_camera()
        u, v, z = cam.project(np.array([0.0, 0.0, 2.0]))
        assert (u, v, z) == (31.5, 31.5, 2.0)

    def test_similar_triangles_offsets(self):
        """Lateral offset x at depth z lands fx*x/z pixels from center."""
        cam = make_camera()
        u, v, _ = cam.project(np.array([0.25, -0.125, 2.0]))
        assert u == pytest.approx(31.5 + 64 * 0.25 / 2.0, abs=1e-12)
        assert v == pytest.approx(31.5 - 64 * 0.125 / 2.0, abs=1e-12)

    def test_depth_zero_is_degenerate(self):
        with pytest.raises(DegenerateProjection):
            make_camera().project(np.array([0.1, 0.1, 0.0]))

    def test_behind_camera_flagged_invalid(self):
        cam = make_camera()
        uv, z, valid = cam.project_points(np.array([[0.0, 0.0, -1.0],
                                                    [0.0, 0.0, 1.0]]))
        assert list(valid) == [False, True]
        # The placeholder lands far outside any feature plane.
        assert uv[0, 0] < -2 * cam.width

    @given(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4), st.floats(0.5, 5.0))
    @settings(max_examples=60, deadline=None)
    def test_unproject_inverts_project(self, x, y, z):
        cam = make_camera(extrinsic=look_at(np.array([0.3, -0.5, -1.4]),
                                            np.array([0.0, 0.0, 0.6])))
        world = np.array([x, y, z])
        u, v, depth = cam.project(world)
        if depth <= 0:
            return
        back = cam.unproject(u, v, depth)
        np.testing.assert_allclose(back, world, atol=1e-9)

    def test_translation_equivariance(self):
        """Shifting world and eye together leaves pixels unchanged."""
        shift = np.array([0.3, -1.1, 0.7])
        pts = np.array([[0.1, 0.2, 1.5], [-0.3, 0.0, 2.5]])
        eye, target = np.array([0.0, -0.6, -1.2]), np.array([0.0, 0.0, 0.5])
        a = make_camera(extrinsic=look_at(eye, target))
        b = make_camera(extrinsic=look_at(eye + shift, target + shift))
        uv_a, _, _ = a.project_points(pts)
        uv_b, _, _ = b.project_points(pts + shift)
        np.testing.assert_allclose(uv_a, uv_b, atol=1e-9)

    def test_volume_corners_project_inside_image(self):
        """The default scene volume must be fully visible."""
        from voxelweave.scenes import SceneConfig

        config = SceneConfig()
        cam = config.make_camera()
        lo, hi = config.volume_box()
        corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                            for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        uv, _, valid = cam.project_points(corners)
        assert valid.all()
        assert (uv >= -0.5).all()
        assert (uv[:, 0] <= config.image_size - 0.5).all()
        assert (uv[:, 1] <= config.image_size - 0.5).all()

    def test_planar_rectangle_projects_to_rectangle(self):
        """A camera-parallel rectangle keeps its corner alignment."""
        cam = make_camera()
        z = 2.0
        corners = np.array([[-0.3, -0.2, z], [0.3, -0.2, z],
                            [0.3, 0.2, z], [-0.3, 0.2, z]])
        uv, _, valid = cam.project_points(corners)
        assert valid.all()
        assert uv[0, 1] == pytest.approx(uv[1, 1], abs=1e-12)  # top edge level
        assert uv[2, 1] == pytest.approx(uv[3, 1], abs=1e-12)
        assert uv[0, 0] == pytest.approx(uv[3, 0], abs=1e-12)  # left edge plumb
        assert uv[1, 0] == pytest.approx(uv[2, 0], abs=1e-12)


class TestFeatureProjection:
    def test_scaling_to_half_resolution(self):
        cam = make_camera()
        pts = np.array([[0.0, 0.0, 2.0]])
        uv, valid = cam.project_to_feature(pts, (32, 32))
        assert valid.all()
        np.testing.assert_allclose(uv[0], [31.5 * 0.5, 31.5 * 0.5], atol=1e-12)

    def test_matches_pointwise_projection(self, rng):
        cam = make_camera(extrinsic=look_at(np.array([0.2, -0.7, -1.5]),
                                            np.array([0.0, 0.0, 0.5])))
        pts = rng.uniform(-0.4, 0.4, (50, 3)) + [0, 0, 1.5]
        uv, valid = cam.project_to_feature(pts, (16, 8))
        for i in range(len(pts)):
            u, v, z = cam.project(pts[i])
            if z > 0:
                assert valid[i]
                np.testing.assert_allclose(uv[i], [u * 16 / 64, v * 8 / 64],
                                           atol=1e-9)

    def test_camera_json_roundtrip(self):
        cam = make_camera(extrinsic=rotation_about("x", 0.25))
        back = PinholeCamera.from_json(cam.to_json())
        assert back.fx == cam.fx and back.width == cam.width
        np.testing.assert_allclose(back.extrinsic.rotation,
                                   cam.extrinsic.rotation, atol=1e-15)
