"""Triangle mesh container, geometry queries, containment, and file formats."""

import numpy as np
import pytest

from voxelweave.camera import RigidTransform, rotation_about
from voxelweave.errors import MeshIntegrityError
from voxelweave.meshes import (
    TriMesh,
    face_areas,
    face_normals,
    is_watertight,
    load_ply,
    merge_meshes,
    mesh_intersects,
    points_in_mesh,
    sample_surface,
    save_obj,
    save_ply,
    signed_volume,
    surface_area,
    transform_mesh,
)
from voxelweave.shapes import box, cylinder, icosphere, torus


def unit_box():
    return box(1.0, 1.0, 1.0)


class TestTriMesh:
    def test_bounds(self):
        m = box(2.0, 1.0, 0.5)
        lo, hi = m.bounds()
        np.testing.assert_allclose(lo, [-1.0, -0.5, -0.25], atol=1e-12)
        np.testing.assert_allclose(hi, [1.0, 0.5, 0.25], atol=1e-12)

    def test_face_index_out_of_range_rejected(self):
        with pytest.raises(MeshIntegrityError):
            TriMesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))

    def test_with_class_copies_geometry(self):
        m = unit_box().with_class(3)
        assert m.class_id == 3
        np.testing.assert_array_equal(m.vertices, unit_box().vertices)

    def test_merge_concatenates_and_reindexes(self):
        a, b = unit_box(), icosphere(0.5, subdivisions=1)
        merged = merge_meshes([a, b])
        assert merged.num_vertices == a.num_vertices + b.num_vertices
        assert merged.num_faces == a.num_faces + b.num_faces
        # Faces of the second mesh must point at the shifted vertices.
        assert merged.faces[a.num_faces:].min() >= a.num_vertices


class TestGeometryQueries:
    def test_unit_box_area_and_volume(self):
        m = unit_box()
        assert surface_area(m) == pytest.approx(6.0, rel=1e-12)
        assert signed_volume(m) == pytest.approx(1.0, rel=1e-12)

    def test_normals_point_outward(self):
        m = unit_box()
        n = face_normals(m)
        centers = m.triangles().mean(axis=1)
        assert (np.einsum("ij,ij->i", n, centers) > 0).all()

    def test_face_areas_sum_to_surface(self):
        m = icosphere(0.3, subdivisions=2)
        assert face_areas(m).sum() == pytest.approx(surface_area(m), rel=1e-12)

    def test_transform_preserves_area_and_volume(self, rng):
        m = cylinder(0.3, 0.8)
        t = rotation_about("y", 0.9).compose(
            RigidTransform(np.eye(3), np.array([0.3, -0.1, 2.0])))
        moved = transform_mesh(m, t)
        assert surface_area(moved) == pytest.approx(surface_area(m), rel=1e-9)
        assert signed_volume(moved) == pytest.approx(signed_volume(m), rel=1e-9)

    def test_uniform_scale_laws(self):
        m = icosphere(0.4, subdivisions=2)
        s = transform_mesh(m, RigidTransform.identity(), scale=2.0)
        assert surface_area(s) == pytest.approx(4 * surface_area(m), rel=1e-9)
        assert signed_volume(s) == pytest.approx(8 * signed_volume(m), rel=1e-9)


class TestWatertight:
    @pytest.mark.parametrize("mesh", [unit_box(), icosphere(0.5, 2),
                                      cylinder(0.4, 1.0), torus(0.5, 0.2)],
                             ids=["box", "sphere", "cylinder", "torus"])
    def test_closed_shapes(self, mesh):
        assert is_watertight(mesh)

    def test_open_fan_is_not(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
        open_mesh = TriMesh(verts, np.array([[0, 1, 2], [0, 1, 3]]))
        assert not is_watertight(open_mesh)

    def test_empty_mesh_is_not_watertight(self):
        empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
        assert not is_watertight(empty)


class TestSampleSurface:
    def test_samples_lie_on_the_surface(self, rng):
        m = unit_box()
        pts = sample_surface(m, 2000, rng)
        assert pts.shape == (2000, 3)
        # On a unit box every surface point has exactly max-|coord| = 0.5.
        assert np.abs(np.abs(pts).max(axis=1) - 0.5).max() < 1e-12

    def test_density_proportional_to_area(self, rng):
        """A box stretched 9:1 in x collects ~'its share' of samples on the
        two large faces."""
        m = box(9.0, 1.0, 1.0)
        pts = sample_surface(m, 30_000, rng)
        on_y_faces = np.abs(np.abs(pts[:, 1]) - 0.5) < 1e-9
        frac = on_y_faces.mean()
        total = 2 * (9 + 9 + 1) / 1.0
        expect = 2 * 9.0 / total
        assert frac == pytest.approx(expect, rel=0.05)

    def test_deterministic_for_equal_rng(self):
        m = icosphere(0.5, 1)
        a = sample_surface(m, 100, np.random.default_rng(4))
        b = sample_surface(m, 100, np.random.default_rng(4))
        assert a.tobytes() == b.tobytes()


class TestContainment:
    def test_box_inside_outside(self):
        m = unit_box()
        pts = np.array([[0.0, 0.0, 0.0], [0.49, 0.49, 0.49],
                        [0.51, 0.0, 0.0], [2.0, 2.0, 2.0]])
        np.testing.assert_array_equal(points_in_mesh(pts, m),
                                      [True, True, False, False])

    def test_on_surface_counts_as_inside(self):
        m = unit_box()
        pts = np.array([[0.5, 0.0, 0.0], [0.5, 0.5, 0.5], [-0.5, 0.2, -0.1]])
        assert points_in_mesh(pts, m).all()

    def test_sphere_against_analytic(self, rng):
        r = 0.37
        m = icosphere(r, subdivisions=3)
        pts = rng.uniform(-0.5, 0.5, (4000, 3))
        got = points_in_mesh(pts, m)
        dist = np.linalg.norm(pts, axis=1)
        # Ignore the thin shell where faceting makes either answer right.
        clear = np.abs(dist - r) > 5e-3
        agree = (got == (dist < r))[clear].mean()
        assert agree == 1.0

    def test_grazing_rows_are_robust(self):
        """Rays aimed straight at edges/vertices still classify correctly."""
        m = unit_box()
        # Cast from points whose y/z exactly hit the box edge planes.
        pts = np.array([[0.0, 0.5, 0.5], [0.0, -0.5, 0.5], [0.0, 0.5, -0.5],
                        [-2.0, 0.5, 0.5]])
        got = points_in_mesh(pts, m)
        np.testing.assert_array_equal(got, [True, True, True, False])


class TestIntersection:
    def test_separated_boxes_do_not_intersect(self):
        a = unit_box()
        b = transform_mesh(unit_box(),
                           RigidTransform(np.eye(3), np.array([3.0, 0, 0])))
        assert not mesh_intersects(a, b)

    def test_overlapping_boxes_intersect(self):
        a = unit_box()
        b = transform_mesh(unit_box(),
                           RigidTransform(np.eye(3), np.array([0.6, 0.4, 0.0])))
        assert mesh_intersects(a, b)

    def test_containment_counts_as_intersection(self):
        outer = box(2.0, 2.0, 2.0)
        inner = box(0.5, 0.5, 0.5)
        assert mesh_intersects(outer, inner)
        assert mesh_intersects(inner, outer)


class TestFileFormats:
    def test_ply_roundtrip_is_bitwise(self, tmp_path):
        m = icosphere(0.4, 1).with_class(2)
        p = tmp_path / "s.ply"
        save_ply(m, p)
        back = load_ply(p)
        assert back.vertices.tobytes() == m.vertices.astype(np.float64).tobytes()
        np.testing.assert_array_equal(back.faces, m.faces)

    def test_obj_groups_and_vertex_lines(self, tmp_path):
        a = unit_box().with_class(1)
        b = icosphere(0.3, 1).with_class(2)
        p = tmp_path / "scene.obj"
        save_obj([a, b], p)
        text = p.read_text().splitlines()
        groups = [l for l in text if l.startswith("o ")]
        assert groups == ["o class_1", "o class_2"]
        n_verts = sum(1 for l in text if l.startswith("v "))
        assert n_verts == a.num_vertices + b.num_vertices

    def test_obj_flips_to_y_up(self, tmp_path):
        """Exported coordinates negate y and z so viewers show y up."""
        m = TriMesh(np.array([[0.1, 0.2, 0.3]] * 3), np.array([[0, 1, 2]]))
        p = tmp_path / "one.obj"
        save_obj([m], p)
        line = next(l for l in p.read_text().splitlines() if l.startswith("v "))
        xs = [float(t) for t in line.split()[1:]]
        np.testing.assert_allclose(xs, [0.1, -0.2, -0.3], atol=1e-12)

    def test_save_rerun_bit_identical(self, tmp_path):
        m = cylinder(0.2, 0.6)
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        save_ply(m, p1)
        save_ply(m, p2)
        assert p1.read_bytes() == p2.read_bytes()
