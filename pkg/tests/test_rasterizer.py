import numpy as np
import pytest

from src.errors import GeometryError
from src.models import CameraPose, TriMesh
from src.rasterizer import rasterize, render_depth, visible_mask
from tests.conftest import make_intrinsics, square

# a unit square 3 units away spans 20 x 20 pixel centers at f = 30
INTR = make_intrinsics(64, 48, f=30.0)
FRONT = CameraPose.look_at([0.0, 0.0, 3.0], [0.0, 0.0, 0.0])
BACK = CameraPose.look_at([0.0, 0.0, -3.0], [0.0, 0.0, 0.0])


def test_square_covers_exact_pixel_block():
    dm = render_depth(square(), FRONT, INTR)
    assert dm.valid.sum() == 400
    rows, cols = np.nonzero(dm.valid)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (14, 33, 22, 41)
    np.testing.assert_allclose(dm.depth[dm.valid], 3.0, rtol=1e-9)
    np.testing.assert_allclose(dm.normal[dm.valid], np.tile([0, 0, -1.0], (400, 1)), atol=1e-9)


def test_shared_edge_pixels_drawn_once():
    _, face_id = rasterize(square(), FRONT, INTR)
    covered = face_id >= 0
    assert covered.sum() == 400
    assert set(np.unique(face_id[covered])) == {0, 1}


def test_backfaces_culled():
    assert render_depth(square(), BACK, INTR).valid.sum() == 0
    assert render_depth(square(), BACK, INTR, cull_backfaces=False).valid.sum() == 400


def test_nearest_surface_wins():
    far, near = square(), square(0.5, z=1.0)
    both = TriMesh(vertices=np.vstack([far.vertices, near.vertices]),
                   faces=np.vstack([far.faces, near.faces + 4]))
    dm = render_depth(both, FRONT, INTR)
    assert dm.depth[23, 31] == pytest.approx(2.0)
    assert dm.depth[15, 23] == pytest.approx(3.0)


def test_behind_camera_triangles_skipped():
    assert render_depth(square(z=5.0), FRONT, INTR).valid.sum() == 0


def test_sphere_depth_matches_ray_intersection(sphere):
    dm = render_depth(sphere, FRONT, INTR)
    # polygonal sphere lies inside the unit sphere, so depths are at or beyond the analytic hit
    d = dm.depth[23, 31]
    assert 2.0 - 1e-9 <= d < 2.02


def test_empty_mesh_rejected():
    with pytest.raises(GeometryError):
        render_depth(TriMesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), int)), FRONT, INTR)


def test_visibility():
    dm = render_depth(square(), FRONT, INTR)
    zbuffer = np.where(dm.valid, dm.depth, np.inf)
    points = np.array([
        [0.0, 0.0, 0.0],     # on the surface
        [0.0, 0.0, -0.5],    # hidden behind it
        [0.0, 0.0, 0.01],    # in front of it
        [1.3, 1.3, 0.0],     # uncovered pixel
        [30.0, 0.0, 0.0],    # outside the image
    ])
    assert visible_mask(points, FRONT, INTR, zbuffer).tolist() == [True, False, True, False, False]
    assert visible_mask(points, FRONT, INTR, zbuffer, allow_uncovered=True).tolist() == \
        [True, False, True, True, False]
    # 1% tolerance absorbs a point just behind the surface
    assert visible_mask(np.array([[0.0, 0.0, -0.02]]), FRONT, INTR, zbuffer).tolist() == [True]
