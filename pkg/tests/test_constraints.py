import numpy as np
import pytest

from config.pipeline_config import EdgeConfig, PclConstraintConfig
from src.constraints import (
    contour_edges,
    contour_vertices,
    edge_targets,
    edge_targets_multi,
    landmark_targets,
    pointcloud_targets,
    snap_to_edges,
)
from src.edges import edge_map_from_mask
from src.errors import ConfigurationError
from src.geometry import front_facing, vertex_normals
from src.models import (
    CameraPose,
    ConstraintKind,
    CorrespondenceTable,
    Intrinsics,
    Landmark3D,
    PointCloud,
    TriMesh,
)
from src.primitives import icosphere
from tests.conftest import make_keyframe

# camera at the origin looking along +z; vertices at z = 1 land on whole pixels
INTR = Intrinsics(fx=10.0, fy=10.0, cx=32.0, cy=24.0, width=64, height=48)
TRIANGLE = TriMesh(vertices=[[-1.0, -1.0, 1.0], [1.0, -1.0, 1.0], [0.0, 1.0, 1.0]], faces=[[0, 2, 1]])


def _single_pixel_map(row, col, width=64):
    mask = np.zeros((48, width), bool)
    mask[row, col] = True
    return edge_map_from_mask(mask)


def _lm(lid, pos):
    return Landmark3D(landmark_id=lid, position=pos, rms_reprojection_error=0.0, num_views=2)


class TestPointCloudTargets:
    def test_matches_per_vertex_rule(self, rng):
        mesh = icosphere(2)
        cloud = PointCloud(points=rng.normal(size=(3000, 3)) * 0.04 + mesh.vertices[rng.integers(0, 162, 3000)])
        cfg = PclConstraintConfig(search_radius=0.1, axial_threshold=0.03, min_points=3)
        cs = pointcloud_targets(mesh, cloud, cfg)
        normals = vertex_normals(mesh)
        expected = {}
        for i, v in enumerate(mesh.vertices):
            off = cloud.points - v
            near = np.linalg.norm(off, axis=1) <= 0.1
            along = off @ normals[i]
            perp = np.linalg.norm(off - np.outer(along, normals[i]), axis=1)
            sel = near & (perp <= 0.03)
            if sel.sum() >= 3:
                closest = np.flatnonzero(sel)[np.argmin(perp[sel])]
                expected[i] = v + along[closest] * normals[i]
        assert cs.vertex_index.tolist() == sorted(expected)
        np.testing.assert_allclose(cs.target, [expected[i] for i in cs.vertex_index], atol=1e-12)
        assert (cs.kind == ConstraintKind.POINTCLOUD).all()

    def test_surface_samples_reproduce_the_vertices(self, rng):
        mesh = icosphere(3)
        u = rng.uniform(size=(len(mesh.faces), 40, 2))
        u[u.sum(axis=2) > 1.0] = 1.0 - u[u.sum(axis=2) > 1.0]
        tri = mesh.vertices[mesh.faces]
        a, b, c = tri[:, None, 0], tri[:, None, 1], tri[:, None, 2]
        samples = a + u[..., :1] * (b - a) + u[..., 1:] * (c - a)
        cloud = PointCloud(points=np.vstack([samples.reshape(-1, 3), mesh.vertices]))
        cs = pointcloud_targets(mesh, cloud, PclConstraintConfig(search_radius=0.1, axial_threshold=0.03))
        assert len(cs) == mesh.n_vertices
        np.testing.assert_allclose(cs.target, mesh.vertices[cs.vertex_index], atol=1e-15)

    def test_points_on_the_normal_line_give_the_middle_one(self):
        mesh = TriMesh(vertices=[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], faces=[[0, 1, 2]])
        delta = 0.01
        cloud = PointCloud(points=[[0.0, 0.0, delta], [0.0, 0.0, 3 * delta], [0.0, 0.0, 2 * delta]])
        cs = pointcloud_targets(mesh, cloud, PclConstraintConfig(search_radius=0.05, axial_threshold=0.001))
        assert cs.vertex_index.tolist() == [0]
        np.testing.assert_allclose(cs.target[0], [0.0, 0.0, 2 * delta], atol=1e-15)

    def test_targets_lie_on_the_normal_line(self, rng):
        mesh = icosphere(2)
        cloud = PointCloud(points=mesh.vertices[rng.integers(0, 162, 2000)] * rng.uniform(0.97, 1.03, (2000, 1))
                           + rng.normal(scale=0.01, size=(2000, 3)))
        cs = pointcloud_targets(mesh, cloud, PclConstraintConfig(search_radius=0.1, axial_threshold=0.03))
        offset = cs.target - mesh.vertices[cs.vertex_index]
        normals = vertex_normals(mesh)[cs.vertex_index]
        np.testing.assert_allclose(np.cross(offset, normals), 0.0, atol=1e-12)

    def test_cloud_order_does_not_matter(self, rng):
        mesh = icosphere(2)
        points = rng.normal(size=(2000, 3)) * 0.03 + mesh.vertices[rng.integers(0, 162, 2000)]
        cfg = PclConstraintConfig(search_radius=0.1, axial_threshold=0.03)
        a = pointcloud_targets(mesh, PointCloud(points=points), cfg)
        b = pointcloud_targets(mesh, PointCloud(points=points[rng.permutation(2000)]), cfg)
        np.testing.assert_array_equal(a.vertex_index, b.vertex_index)
        np.testing.assert_allclose(a.target, b.target, atol=1e-14)

    def test_offset_shell_pulls_radially(self):
        mesh = icosphere(2)
        cloud = PointCloud(points=icosphere(6).vertices * 1.05)
        cs = pointcloud_targets(mesh, cloud, PclConstraintConfig(search_radius=0.12, axial_threshold=0.05))
        assert len(cs) == mesh.n_vertices
        np.testing.assert_allclose(np.linalg.norm(cs.target, axis=1), 1.05, atol=0.01)

    def test_too_few_points(self):
        mesh = icosphere(1)
        cloud = PointCloud(points=mesh.vertices[:2] * 1.01)
        assert len(pointcloud_targets(mesh, cloud, PclConstraintConfig(search_radius=0.1, min_points=3))) == 0
        assert len(pointcloud_targets(mesh, PointCloud(points=np.zeros((0, 3))), PclConstraintConfig())) == 0


class TestLandmarkTargets:
    def test_targets_and_weights(self):
        table = CorrespondenceTable(entries={30: 5, 31: 7})
        cs = landmark_targets([_lm(31, (1.0, 2.0, 3.0)), _lm(30, (0.0, 0.0, 1.0))], table, weight=4.0)
        assert cs.vertex_index.tolist() == [7, 5]
        assert cs.weight.tolist() == [4.0, 4.0]
        assert cs.target[0].tolist() == [1.0, 2.0, 3.0]

    @pytest.mark.parametrize("entries, ids", [
        ({30: 5}, [30, 30]),
        ({30: 5}, [30, 31]),
        ({30: 5, 31: 5}, [30, 31]),
    ])
    def test_invalid_tables(self, entries, ids):
        with pytest.raises(ConfigurationError):
            landmark_targets([_lm(i, (0.0, 0.0, 1.0)) for i in ids], CorrespondenceTable(entries=entries))


class TestContours:
    def test_contour_edges_match_per_edge_scan(self, sphere):
        pose = CameraPose.look_at([0.0, 0.3, 4.0], [0.0, 0.0, 0.0])
        front = front_facing(sphere, pose)
        adjacent = {}
        for fi, f in enumerate(sphere.faces):
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                adjacent.setdefault((min(a, b), max(a, b)), []).append(front[fi])
        expected = sorted(e for e, flags in adjacent.items() if any(flags) and not all(flags))
        got = sorted(map(tuple, contour_edges(sphere, front).tolist()))
        assert got == expected and len(got) > 0

    def test_boundary_edges_of_front_faces(self):
        edges = contour_edges(TRIANGLE, np.array([True]))
        assert len(edges) == 3
        assert len(contour_edges(TRIANGLE, np.array([False]))) == 0

    def test_sphere_contour_is_grazing(self, sphere):
        pose = CameraPose.look_at([0.0, 0.0, 4.0], [0.0, 0.0, 0.0])
        intr = Intrinsics(fx=60.0, fy=60.0, cx=31.5, cy=23.5, width=64, height=48)
        vids = contour_vertices(sphere, pose, intr)
        assert len(vids) > 10
        v = sphere.vertices[vids]
        view = pose.center - v
        view /= np.linalg.norm(view, axis=1, keepdims=True)
        assert np.abs(np.einsum('ij,ij->i', v, view)).max() < 0.35


class TestEdgeTargets:
    def test_snap_lifts_to_vertex_depth(self):
        em = _single_pixel_map(14, 25)
        matched, targets, distance = snap_to_edges(CameraPose.identity(), INTR, TRIANGLE.vertices, em, 5.0)
        assert matched.tolist() == [True, False, False]
        assert distance[0] == pytest.approx(3.0)
        np.testing.assert_allclose(targets[0], [-0.7, -1.0, 1.0], atol=1e-12)
        assert np.isinf(distance[1])

    def test_snap_respects_radius(self):
        em = _single_pixel_map(14, 25)
        matched, _, _ = snap_to_edges(CameraPose.identity(), INTR, TRIANGLE.vertices, em, 2.5)
        assert not matched.any()

    def test_single_keyframe(self):
        kf = make_keyframe(0, CameraPose.identity(), INTR)
        cs = edge_targets(TRIANGLE, kf, _single_pixel_map(14, 25), tau_edge_px=5.0)
        assert cs.vertex_index.tolist() == [0]
        assert (cs.kind == ConstraintKind.EDGE).all()

    def test_nearest_keyframe_wins(self):
        a = make_keyframe(4, CameraPose.identity(), INTR)
        b = make_keyframe(2, CameraPose.identity(), INTR)
        cs = edge_targets_multi(TRIANGLE, [a, b], [_single_pixel_map(14, 25), _single_pixel_map(14, 18)], 5.0)
        np.testing.assert_allclose(cs.target, [[-0.7, -1.0, 1.0]], atol=1e-12)

    def test_ties_go_to_lower_id(self):
        a = make_keyframe(4, CameraPose.identity(), INTR)
        b = make_keyframe(2, CameraPose.identity(), INTR)
        cs = edge_targets_multi(TRIANGLE, [a, b], [_single_pixel_map(14, 25), _single_pixel_map(14, 19)], 5.0)
        np.testing.assert_allclose(cs.target, [[-1.3, -1.0, 1.0]], atol=1e-12)

    def test_radius_follows_each_keyframe_width(self):
        cfg = EdgeConfig(reference_width=64, tau_edge_px_reference=2.0)
        wide = Intrinsics(fx=10.0, fy=10.0, cx=32.0, cy=24.0, width=256, height=48)
        narrow_kf = make_keyframe(0, CameraPose.identity(), INTR)
        wide_kf = make_keyframe(1, CameraPose.identity(), wide)
        narrow_map, wide_map = _single_pixel_map(14, 25), _single_pixel_map(14, 25, width=256)
        # the match is 3 px away: outside 2 px at width 64, inside 8 px at width 256
        assert len(edge_targets(TRIANGLE, narrow_kf, narrow_map, cfg=cfg)) == 0
        assert edge_targets(TRIANGLE, wide_kf, wide_map, cfg=cfg).vertex_index.tolist() == [0]
        cs = edge_targets_multi(TRIANGLE, [narrow_kf, wide_kf], [narrow_map, wide_map], cfg=cfg)
        np.testing.assert_allclose(cs.target, [[-0.7, -1.0, 1.0]], atol=1e-12)

    def test_explicit_radius_overrides_config(self):
        kf = make_keyframe(0, CameraPose.identity(), INTR)
        cfg = EdgeConfig(reference_width=64, tau_edge_px_reference=2.0)
        assert len(edge_targets(TRIANGLE, kf, _single_pixel_map(14, 25), tau_edge_px=5.0, cfg=cfg)) == 1
