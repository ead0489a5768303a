"""
Shared fixtures: small meshes, camera rigs and textured scenes
"""
import sys
from pathlib import Path

import numba as nb
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.models import CameraPose, Intrinsics, Keyframe, TriMesh  # noqa: E402
from src.primitives import icosphere  # noqa: E402
from src.spatial import point_triangle_distance_sq  # noqa: E402


def make_intrinsics(width=64, height=48, f=60.0) -> Intrinsics:
    return Intrinsics(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0, width=width, height=height)


def make_keyframe(kid: int, pose: CameraPose, intr: Intrinsics, image=None) -> Keyframe:
    if image is None:
        image = np.zeros((intr.height, intr.width), dtype=np.uint8)
    return Keyframe(id=kid, image=image, pose=pose, intrinsics=intr)


def square(size=1.0, z=0.0) -> TriMesh:
    """Two-triangle square in the plane z = const, facing +z"""
    s = size
    v = [[-s, -s, z], [s, -s, z], [s, s, z], [-s, s, z]]
    return TriMesh(vertices=v, faces=[[0, 1, 2], [0, 2, 3]])


def grid_plane(n=21, size=1.0, z=0.0) -> TriMesh:
    """Regular n x n vertex grid in the plane z = const, facing +z"""
    xs = np.linspace(-size, size, n)
    X, Y = np.meshgrid(xs, xs)
    v = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], axis=1)
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a, b, d, e = r * n + c, r * n + c + 1, (r + 1) * n + c, (r + 1) * n + c + 1
            faces += [[a, b, e], [a, e, d]]
    return TriMesh(vertices=v, faces=faces)


def arc_rig(n=9, step_deg=10.0, distance=4.0, target=(0.0, 0.0, 0.0), intr=None):
    """Keyframes on a horizontal arc in the xz-plane looking at target"""
    intr = intr or make_intrinsics()
    target = np.asarray(target, dtype=np.float64)
    frames = []
    for k in range(n):
        az = np.radians(step_deg * (k - (n - 1) / 2.0))
        eye = target + distance * np.array([np.sin(az), 0.0, np.cos(az)])
        frames.append(make_keyframe(k, CameraPose.look_at(eye, target), intr))
    return frames


def brute_force_distances(points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Point-to-surface distance by scanning every triangle"""
    P = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return _scan_triangles(P, mesh.vertices, mesh.faces)


@nb.njit(cache=True)
def _scan_triangles(P, V, F):
    out = np.empty(P.shape[0])
    for i in range(P.shape[0]):
        best = np.inf
        for t in range(F.shape[0]):
            d = point_triangle_distance_sq(P[i, 0], P[i, 1], P[i, 2], V[F[t, 0]], V[F[t, 1]], V[F[t, 2]])
            if d < best:
                best = d
        out[i] = np.sqrt(best)
    return out


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intr():
    return make_intrinsics()


@pytest.fixture
def sphere():
    return icosphere(3)


def plane_texture(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Smooth non-periodic texture in [0.1, 0.9] on the plane z = 0"""
    t = (np.sin(2 * np.pi * X / 0.45) + np.sin(2 * np.pi * (0.6 * X + 0.8 * Y) / 0.33)
         + np.sin(2 * np.pi * (0.8 * X - 0.6 * Y) / 0.71 + 1.0) + np.sin(2 * np.pi * Y / 0.52 + 2.0))
    return 0.5 + 0.1 * t


def render_textured_plane(pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """Float image of the textured plane z = 0 by exact ray casting"""
    u, v = np.meshgrid(np.arange(intr.width, dtype=np.float64), np.arange(intr.height, dtype=np.float64))
    rays = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
    d = rays @ pose.rotation
    c = pose.center
    lam = -c[2] / d[..., 2]
    X = c[0] + lam * d[..., 0]
    Y = c[1] + lam * d[..., 1]
    return plane_texture(X, Y)


def plane_rig(offsets=((0.0, 0.0), (0.4, 0.0), (-0.4, 0.0), (0.0, 0.4), (0.0, -0.4)), distance=3.0, intr=None):
    """Cameras above the textured plane z = 0, all looking at the origin"""
    intr = intr or make_intrinsics()
    frames = []
    for k, (dx, dy) in enumerate(offsets):
        pose = CameraPose.look_at([dx, dy, distance], [0.0, 0.0, 0.0])
        frames.append(make_keyframe(k, pose, intr, render_textured_plane(pose, intr)))
    return frames
