"""
Procedural Meshes
Icospheres, the bundled head proxy and its ellipsoid template
"""
import logging
from typing import Dict, Tuple

import numpy as np

from src.models import EAR_ID_BASE, TriMesh

logger = logging.getLogger(__name__)

HEAD_AXES = (0.78, 1.0, 0.9)

_PHI = (1.0 + 5.0 ** 0.5) / 2.0
_ICOSAHEDRON_VERTICES = np.array([
    [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
    [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
    [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
], dtype=np.float64)
_ICOSAHEDRON_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def _subdivide(vertices: np.ndarray, faces: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    unique, inverse = np.unique(edges, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mid = vertices[unique].mean(axis=1)
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    base = len(vertices)
    n = len(faces)
    ab = base + inverse[:n]
    bc = base + inverse[n:2 * n]
    ca = base + inverse[2 * n:]
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    new_faces = np.concatenate([
        np.stack([a, ab, ca], axis=1),
        np.stack([b, bc, ab], axis=1),
        np.stack([c, ca, bc], axis=1),
        np.stack([ab, bc, ca], axis=1),
    ])
    return np.vstack([vertices, mid]), new_faces


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Unit-direction icosphere with 10 * 4^s + 2 vertices and outward winding"""
    v = _ICOSAHEDRON_VERTICES / np.linalg.norm(_ICOSAHEDRON_VERTICES, axis=1, keepdims=True)
    f = _ICOSAHEDRON_FACES.copy()
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
    # convex about the origin: orient every face outward
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    inward = np.einsum('ij,ij->i', n, v[f].mean(axis=1)) < 0.0
    f[inward] = f[inward][:, ::-1]
    return TriMesh(vertices=v * radius, faces=f)


def _bump(d: np.ndarray, center, width_az: float, width_el: float) -> np.ndarray:
    az, el = np.radians(center[0]), np.radians(center[1])
    c = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    cos = np.clip(d @ c, -1.0, 1.0)
    # separable falloff in the tangent frame of the bump center
    east = np.array([np.cos(az), 0.0, -np.sin(az)])
    north = np.cross(c, east)
    u = np.arctan2(d @ east, cos)
    v = np.arctan2(d @ north, cos)
    return np.exp(-(u / np.radians(width_az)) ** 2 - (v / np.radians(width_el)) ** 2) * (cos > 0.0)


def head_radius(directions: np.ndarray) -> np.ndarray:
    """Radial scale of the head proxy along unit directions (face toward +z, up +y)"""
    d = np.asarray(directions, dtype=np.float64)
    r = np.ones(len(d))
    r += 0.22 * _bump(d, (0.0, -2.0), 7.0, 14.0)          # nose
    r += 0.06 * _bump(d, (0.0, 20.0), 30.0, 6.0)          # brow
    r -= 0.05 * _bump(d, (-22.0, 12.0), 8.0, 5.0)         # eye sockets
    r -= 0.05 * _bump(d, (22.0, 12.0), 8.0, 5.0)
    r += 0.05 * _bump(d, (0.0, -42.0), 18.0, 8.0)         # chin
    r += 0.16 * _bump(d, (-90.0, 4.0), 7.0, 14.0)         # ears
    r += 0.16 * _bump(d, (90.0, 4.0), 7.0, 14.0)
    return r


def head_proxy(subdivisions: int = 5) -> TriMesh:
    """
    Bundled head-shaped test surface

    A deterministic radial deformation of an icosphere (elongated skull,
    nose, brow, eye sockets, chin and ears); 10242 vertices at 5 subdivisions.
    """
    sphere = icosphere(subdivisions)
    d = sphere.vertices
    return sphere.with_vertices(d * np.array(HEAD_AXES) * head_radius(d)[:, None])


def ellipsoid_template(subdivisions: int = 5) -> TriMesh:
    """The undeformed skull of head_proxy: same topology, no facial features"""
    sphere = icosphere(subdivisions)
    return sphere.with_vertices(sphere.vertices * np.array(HEAD_AXES))


def bounding_ellipsoid(mesh: TriMesh) -> TriMesh:
    """Ellipsoid with the topology of `mesh`, each vertex moved along its direction from the centroid"""
    center = mesh.centroid
    d = mesh.vertices - center
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    lo, hi = mesh.bbox
    return mesh.with_vertices(center + d * 0.5 * (hi - lo))


# ═══════════════════════════════════════════════════════════
# LANDMARK LAYOUT
# ═══════════════════════════════════════════════════════════

def _landmark_directions() -> Dict[int, Tuple[float, float]]:
    """(azimuth, elevation) in degrees for face ids 0-67 and ear ids from EAR_ID_BASE"""
    layout: Dict[int, Tuple[float, float]] = {}
    for k in range(17):
        s = -1.0 + 2.0 * k / 16.0
        layout[k] = (62.0 * s, -12.0 - 30.0 * (1.0 - s * s))
    for k in range(10):
        layout[17 + k] = (-40.0 + 80.0 * k / 9.0 + (4.0 if k >= 5 else -4.0), 24.0)
    for k in range(4):
        layout[27 + k] = (0.0, 16.0 - 6.0 * k)
    for k in range(5):
        layout[31 + k] = (-12.0 + 6.0 * k, -10.0)
    for eye, az0 in ((36, -22.0), (42, 22.0)):
        for k in range(6):
            a = np.pi * k / 3.0
            layout[eye + k] = (az0 + 7.0 * np.cos(a), 12.0 + 3.5 * np.sin(a))
    for k in range(12):
        a = 2.0 * np.pi * k / 12.0
        layout[48 + k] = (15.0 * np.cos(a), -26.0 + 6.0 * np.sin(a))
    for k in range(8):
        a = 2.0 * np.pi * k / 8.0
        layout[60 + k] = (9.0 * np.cos(a), -26.0 + 2.5 * np.sin(a))
    for ear, az0 in ((EAR_ID_BASE, -90.0), (EAR_ID_BASE + 10, 90.0)):
        for k in range(10):
            a = 2.0 * np.pi * k / 10.0
            # first six ids trace the outer rim
            radius = 1.0 if k < 6 else 0.45
            layout[ear + k] = (az0 + 6.0 * radius * np.cos(a), 4.0 + 12.0 * radius * np.sin(a))
    return layout


def ear_outer_contour_ids() -> list:
    return [EAR_ID_BASE + k for k in range(6)] + [EAR_ID_BASE + 10 + k for k in range(6)]


def landmark_vertices(mesh: TriMesh) -> Dict[int, int]:
    """
    Assign each landmark id a distinct vertex by direction from the centroid

    The face is assumed to look along +z with +y up.
    """
    d = mesh.vertices - mesh.centroid
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    taken = set()
    out: Dict[int, int] = {}
    for lid, (az, el) in sorted(_landmark_directions().items()):
        az, el = np.radians(az), np.radians(el)
        target = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        for v in np.argsort(-(d @ target), kind='stable'):
            if int(v) not in taken:
                taken.add(int(v))
                out[lid] = int(v)
                break
    return out
