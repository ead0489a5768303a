import numpy as np
import pytest
from pydantic import ValidationError

from src.errors import GeometryError
from src.models import (
    CameraPose,
    ConstraintKind,
    ConstraintSet,
    CorrespondenceTable,
    DepthMap,
    Intrinsics,
    PointCloud,
    TriMesh,
    VertexTransforms,
)
from tests.conftest import make_intrinsics, make_keyframe, square


def test_principal_point_must_be_inside():
    with pytest.raises(ValidationError):
        Intrinsics(fx=10, fy=10, cx=80, cy=10, width=64, height=48)


def test_rotation_must_be_proper():
    with pytest.raises(ValidationError):
        CameraPose(rotation=np.diag([1.0, 1.0, -1.0]), translation=np.zeros(3))
    with pytest.raises(ValidationError):
        CameraPose(rotation=2 * np.eye(3), translation=np.zeros(3))


def test_look_at_center_and_orientation():
    pose = CameraPose.look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(pose.center, [0, 0, 3], atol=1e-12)
    np.testing.assert_allclose(pose.to_camera(np.zeros((1, 3)))[0], [0, 0, 3], atol=1e-12)
    # world up maps to negative camera y (image rows grow downward)
    assert pose.to_camera(np.array([[0.0, 1.0, 0.0]]))[0, 1] < 0.0


def test_keyframe_image_size_checked():
    intr = make_intrinsics()
    with pytest.raises(ValidationError):
        make_keyframe(0, CameraPose.identity(), intr, image=np.zeros((10, 10), np.uint8))


def test_keyframe_gray_scales_bytes():
    intr = make_intrinsics()
    kf = make_keyframe(0, CameraPose.identity(), intr, image=np.full((48, 64, 3), 255, np.uint8))
    np.testing.assert_allclose(kf.gray, 1.0)


class TestTriMesh:
    def test_rejects_bad_faces(self):
        with pytest.raises(ValidationError):
            TriMesh(vertices=np.zeros((3, 3)), faces=[[0, 1, 3]])
        with pytest.raises(ValidationError):
            TriMesh(vertices=np.zeros((3, 3)), faces=[[0, 1, 1]])

    def test_edges_unique_sorted(self):
        e = square().edges
        assert e.tolist() == [[0, 1], [0, 2], [0, 3], [1, 2], [2, 3]]

    def test_with_vertices_keeps_topology(self):
        m = square()
        moved = m.with_vertices(m.vertices + 1.0)
        assert np.array_equal(moved.faces, m.faces)
        with pytest.raises(GeometryError):
            m.with_vertices(np.zeros((3, 3)))

    def test_bbox(self):
        m = square(2.0, z=1.0)
        np.testing.assert_allclose(m.bbox, [[-2, -2, 1], [2, 2, 1]])
        assert m.bbox_diagonal == pytest.approx(np.sqrt(32.0))

    def test_arrays_are_read_only(self):
        m = square()
        with pytest.raises(ValueError):
            m.vertices[0, 0] = 5.0


class TestDepthMap:
    def test_from_depth_marks_invalid(self):
        dm = DepthMap.from_depth([[1.0, -1.0], [np.nan, np.inf]])
        assert dm.valid.tolist() == [[True, False], [False, False]]
        assert np.isinf(dm.depth[0, 1])

    def test_valid_depth_must_be_positive(self):
        with pytest.raises(ValidationError):
            DepthMap(depth=[[0.0]], valid=[[True]])

    def test_valid_normals_unit(self):
        with pytest.raises(ValidationError):
            DepthMap(depth=[[1.0]], valid=[[True]], normal=[[[0.0, 0.0, 2.0]]])


def test_point_cloud_lengths():
    with pytest.raises(ValidationError):
        PointCloud(points=np.zeros((3, 3)), support_count=[1, 2])
    with pytest.raises(ValidationError):
        PointCloud(points=np.zeros((1, 3)), support_count=[0])
    assert len(PointCloud(points=np.zeros((0, 3)))) == 0


class TestConstraintSet:
    def test_one_constraint_per_vertex_and_kind(self):
        with pytest.raises(ValidationError):
            ConstraintSet.of(ConstraintKind.POINTCLOUD, [3, 3], np.zeros((2, 3)))

    def test_merge_allows_different_kinds(self):
        a = ConstraintSet.of(ConstraintKind.POINTCLOUD, [3], [[0, 0, 1]])
        b = ConstraintSet.of(ConstraintKind.LANDMARK, [3], [[0, 0, 2]], weight=5.0)
        merged = ConstraintSet.merge(a, b, ConstraintSet.empty())
        assert len(merged) == 2
        assert merged.count(ConstraintKind.LANDMARK) == 1
        assert merged.of_kind(ConstraintKind.LANDMARK).weight.tolist() == [5.0]
        assert [c.kind for c in merged.constraints] == [ConstraintKind.POINTCLOUD, ConstraintKind.LANDMARK]

    def test_from_constraints_round_trip(self):
        a = ConstraintSet.of(ConstraintKind.EDGE, [1, 2], [[0, 0, 1], [1, 1, 1]], weight=[0.5, 2.0])
        b = ConstraintSet.from_constraints(a.constraints)
        assert np.array_equal(a.vertex_index, b.vertex_index)
        assert np.array_equal(a.target, b.target)


def test_correspondence_subset_rule():
    table = CorrespondenceTable(entries={0: 1, 30: 2, 100: 3, 107: 4}, ear_contour_ids=[100])
    assert not table.is_used(0)
    assert table.is_used(30)
    assert table.is_used(100)
    assert not table.is_used(107)
    with pytest.raises(GeometryError):
        table.check_against(square())


def test_vertex_transforms_identity():
    X = VertexTransforms.identity(3)
    assert X.matrix.shape == (12, 3)
    np.testing.assert_array_equal(X.blocks[1], np.vstack([np.eye(3), np.zeros((1, 3))]))
    with pytest.raises(ValidationError):
        VertexTransforms(matrix=np.zeros((5, 3)))
