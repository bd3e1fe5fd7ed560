"""Volumetric IoU, surface F-score / Chamfer, and score aggregation."""

import numpy as np
import pytest

from voxelweave.camera import RigidTransform
from voxelweave.errors import ContractError
from voxelweave.meshes import TriMesh, transform_mesh
from voxelweave.metrics import (
    EvalReport,
    TriangleDistanceIndex,
    _point_triangle_distance,
    chamfer_distance,
    default_tau,
    fscore,
    labels_from_probs,
    score_scene,
    volumetric_iou,
)
from voxelweave.shapes import box, icosphere
from voxelweave.volume import GridSpec


def empty_mesh():
    return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int32))


def shifted(mesh, dx):
    return transform_mesh(mesh, RigidTransform(np.eye(3), np.array([dx, 0.0, 0.0])))


class TestVolumetricIoU:
    def test_half_overlapping_boxes_exact_third(self):
        a = np.zeros((8, 8, 8), np.int32)
        b = np.zeros((8, 8, 8), np.int32)
        a[0:4] = 1
        b[2:6] = 1
        assert volumetric_iou(a, b, 1) == 1 / 3
        assert volumetric_iou(b, a, 1) == 1 / 3        # symmetric

    def test_identity_is_one(self, rng):
        labels = rng.integers(0, 3, (6, 6, 6)).astype(np.int32)
        assert volumetric_iou(labels, labels, 1) == 1.0
        assert volumetric_iou(labels, labels, 2) == 1.0

    def test_both_empty_is_one(self):
        z = np.zeros((4, 4, 4), np.int32)
        assert volumetric_iou(z, z, 1) == 1.0

    def test_one_empty_is_zero(self):
        z = np.zeros((4, 4, 4), np.int32)
        full = np.ones((4, 4, 4), np.int32)
        assert volumetric_iou(z, full, 1) == 0.0

    def test_per_class_isolation(self):
        """Cells of other classes count as background for the queried one."""
        a = np.zeros((4, 4, 4), np.int32)
        b = np.zeros((4, 4, 4), np.int32)
        a[0] = 1
        b[0] = 1
        b[1] = 2          # extra class-2 blob only in b
        assert volumetric_iou(a, b, 1) == 1.0
        assert volumetric_iou(a, b, 2) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            volumetric_iou(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)), 1)


class TestLabelsFromProbs:
    def test_strict_majority_rule(self):
        vals = np.array([[[[0.2, 0.7, 0.1],      # class 1 wins
                           [0.5, 0.5, 0.0],      # exactly 0.5 -> void
                           [0.2, 0.4, 0.4],      # argmax below 0.5 -> void
                           [0.9, 0.05, 0.05]]]])  # void argmax -> void
        np.testing.assert_array_equal(labels_from_probs(vals)[0, 0],
                                      [1, 0, 0, 0])

    def test_rejects_wrong_rank(self):
        with pytest.raises(ContractError):
            labels_from_probs(np.zeros((4, 4, 4)))


class TestExactDistance:
    def test_index_matches_brute_force(self, rng):
        mesh = icosphere(0.4, subdivisions=2)
        pts = rng.uniform(-0.8, 0.8, (500, 3))
        index = TriangleDistanceIndex(mesh)
        got = index.query(pts)
        tris = mesh.triangles()
        brute = _point_triangle_distance(
            pts[:, None, :], tris[None, :, 0], tris[None, :, 1],
            tris[None, :, 2]).min(axis=1)
        np.testing.assert_allclose(got, brute, rtol=0, atol=1e-13)

    def test_point_triangle_against_dense_sampling(self, rng):
        """The closed-form distance must lower-bound (and nearly meet) the
        minimum over a dense barycentric sampling of the triangle."""
        u = np.linspace(0, 1, 80)
        uu, vv = np.meshgrid(u, u)
        keep = (uu + vv) <= 1
        l1, l2 = uu[keep], vv[keep]
        for _ in range(30):
            a, b, c = rng.uniform(-1, 1, (3, 3))
            p = rng.uniform(-1.5, 1.5, 3)
            exact = float(_point_triangle_distance(p[None], a[None], b[None],
                                                   c[None])[0])
            dense = a + np.outer(l1, b - a) + np.outer(l2, c - a)
            sampled = np.linalg.norm(dense - p, axis=1).min()
            edge = max(np.linalg.norm(b - a), np.linalg.norm(c - b),
                       np.linalg.norm(a - c))
            assert exact <= sampled + 1e-12
            assert sampled - exact <= edge / 40

    def test_points_on_surface_have_zero_distance(self, rng):
        mesh = box(0.5, 0.3, 0.4)
        from voxelweave.meshes import sample_surface
        pts = sample_surface(mesh, 1000, rng)
        assert TriangleDistanceIndex(mesh).query(pts).max() < 1e-12

    def test_degenerate_faces_are_ignored(self):
        base = box(0.4, 0.4, 0.4)
        verts = np.concatenate([base.vertices, np.zeros((3, 3)) + 5.0])
        n = base.num_vertices
        faces = np.concatenate([base.faces, [[n, n + 1, n + 2]]])  # zero area
        spiked = TriMesh(verts, faces.astype(np.int32))
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        got = TriangleDistanceIndex(spiked).query(pts)
        np.testing.assert_allclose(got, [0.2, 0.8], atol=1e-12)

    def test_empty_mesh_rejected(self):
        with pytest.raises(ContractError):
            TriangleDistanceIndex(empty_mesh())

    def test_bad_query_shape_rejected(self):
        index = TriangleDistanceIndex(box(1, 1, 1))
        with pytest.raises(ContractError):
            index.query(np.zeros((5, 2)))


class TestFscore:
    def test_identical_meshes_score_one(self):
        m = icosphere(0.3, 2)
        assert fscore(m, m, tau=0.01, num_samples=5000) == 1.0

    def test_offset_within_half_tau_scores_one(self):
        tau = 0.05
        a = box(0.4, 0.4, 0.4)
        assert fscore(shifted(a, tau / 2), a, tau, num_samples=20000) == 1.0

    def test_offset_three_tau_scores_below_one(self):
        tau = 0.05
        a = box(0.4, 0.4, 0.4)
        assert fscore(shifted(a, 3 * tau), a, tau, num_samples=20000) < 0.95

    def test_empty_conventions(self):
        m = box(1, 1, 1)
        assert fscore(empty_mesh(), empty_mesh(), 0.1) == 1.0
        assert fscore(empty_mesh(), m, 0.1) == 0.0
        assert fscore(m, empty_mesh(), 0.1) == 0.0

    def test_non_positive_tau_rejected(self):
        m = box(1, 1, 1)
        with pytest.raises(ContractError):
            fscore(m, m, 0.0)

    def test_deterministic_by_default(self):
        a, b = box(0.4, 0.4, 0.4), icosphere(0.25, 2)
        assert fscore(a, b, 0.02, 4000) == fscore(a, b, 0.02, 4000)


class TestChamfer:
    def test_identical_meshes_near_zero(self):
        m = icosphere(0.3, 2)
        assert chamfer_distance(m, m, num_samples=5000) <= 1e-6

    def test_parallel_squares_have_distance_d(self):
        d = 0.25
        quad = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
        faces = np.array([[0, 1, 2], [0, 2, 3]], np.int32)
        a = TriMesh(quad, faces)
        b = TriMesh(quad + [0, 0, d], faces)
        assert chamfer_distance(a, b, num_samples=20000) == pytest.approx(d, rel=0.01)

    def test_scale_homogeneity(self):
        a, b = box(0.4, 0.3, 0.5), icosphere(0.3, 2)
        base = chamfer_distance(a, b, num_samples=8000)
        s = 2.5
        big = chamfer_distance(transform_mesh(a, RigidTransform.identity(), s),
                               transform_mesh(b, RigidTransform.identity(), s),
                               num_samples=8000)
        assert big == pytest.approx(s * base, rel=1e-9)

    def test_empty_conventions(self):
        m = box(1, 1, 1)
        assert chamfer_distance(empty_mesh(), empty_mesh()) == 0.0
        assert chamfer_distance(m, empty_mesh()) == float("inf")
        assert chamfer_distance(empty_mesh(), m) == float("inf")


class TestDefaultTau:
    def test_one_percent_of_diagonal(self):
        spec = GridSpec((32, 32, 32), 1 / 32, np.full(3, 1 / 64),
                        np.array([-0.5, -0.5, 1.2]))
        assert default_tau(spec) == pytest.approx(0.01 * spec.domain_diagonal(),
                                                  rel=1e-12)


@pytest.fixture(scope="module")
def perfect_report(pair_dataset):
    _, config, records = pair_dataset
    spec = config.base_grid()
    rows = []
    for rec in records[:2]:
        from voxelweave.scenes import voxelize
        gt = voxelize(rec.scene, spec)
        meshes = {o.class_id: rec.scene.posed_meshes()[i]
                  for i, o in enumerate(rec.scene.objects)}
        rows += score_scene(rec.index, rec.scene, gt, gt, meshes, spec,
                            num_samples=2000, occlusion_resolution=48)
    return EvalReport(rows, spec)


class TestScoreAggregation:
    def test_perfect_prediction_scores(self, perfect_report):
        for r in perfect_report.scores:
            assert r.iou == 1.0
            assert r.fscore == 1.0
            assert r.chamfer <= 1e-9
            assert 0.0 <= r.occlusion <= 1.0

    def test_overall_means_are_instance_means(self, perfect_report):
        rows = perfect_report.scores
        overall = perfect_report.overall()
        assert overall["count"] == len(rows)
        assert abs(overall["iou"] - np.mean([r.iou for r in rows])) <= 1e-12
        assert abs(overall["fscore"] - np.mean([r.fscore for r in rows])) <= 1e-12

    def test_mean_iou_is_mean_of_class_means(self, perfect_report):
        per = perfect_report.per_class()
        expect = np.mean([v["iou"] for v in per.values()])
        assert abs(perfect_report.mean_iou() - expect) <= 1e-12

    def test_bins_partition_instances(self, perfect_report):
        occ = perfect_report.occlusion_bins()
        assert set(occ) == {"visible", "partial", "heavy"}
        assert sum(v["count"] for v in occ.values()) == len(perfect_report.scores)
        dep = perfect_report.depth_bins()
        assert set(dep) == {"near", "mid", "far"}
        assert sum(v["count"] for v in dep.values()) == len(perfect_report.scores)

    def test_report_json_roundtrip(self, perfect_report, tmp_path):
        import json
        perfect_report.save(tmp_path / "report.json")
        with open(tmp_path / "report.json") as fh:
            back = json.load(fh)
        assert back["overall"]["iou"] == 1.0
        assert len(back["instances"]) == len(perfect_report.scores)

    def test_missing_class_counts_as_empty_prediction(self, pair_dataset):
        _, config, records = pair_dataset
        spec = config.base_grid()
        rec = records[0]
        from voxelweave.scenes import voxelize
        gt = voxelize(rec.scene, spec)
        rows = score_scene(rec.index, rec.scene, np.zeros_like(gt), gt, {},
                           spec, num_samples=1000, occlusion_resolution=32)
        for r in rows:
            assert r.iou == 0.0
            assert r.fscore == 0.0
            assert r.chamfer == float("inf")

    def test_empty_report_conventions(self):
        spec = GridSpec((8, 8, 8), 0.125, np.full(3, 0.0625), np.zeros(3))
        report = EvalReport([], spec)
        assert np.isnan(report.mean_iou())
        assert report.overall()["count"] == 0
