"""
Spatial Indexing Module
Exact radius queries over point clouds and point-to-surface distances over meshes
"""
import logging
from typing import List, Optional, Tuple

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from src.errors import GeometryError
from src.models import PointCloud, TriMesh

logger = logging.getLogger(__name__)


class PointIndex:
    """Axis-aligned splitting tree over a point set; queries are exact"""

    def __init__(self, points):
        if isinstance(points, PointCloud):
            points = points.points
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self._tree: Optional[cKDTree] = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def _exact(self, center: np.ndarray, candidates, r: float) -> np.ndarray:
        idx = np.asarray(sorted(candidates), dtype=np.int64)
        if not len(idx):
            return idx
        keep = np.linalg.norm(self.points[idx] - center, axis=1) <= r
        return idx[keep]

    def radius_neighbors(self, center, r: float) -> np.ndarray:
        """
        Indices of all points with ||p - center|| <= r, ascending

        Args:
            center: Query point (3,)
            r: Radius, > 0

        Returns:
            int64 index array
        """
        if not r > 0.0:
            raise GeometryError(f"radius must be positive, got {r}")
        center = np.asarray(center, dtype=np.float64)
        if self._tree is None:
            return np.zeros(0, dtype=np.int64)
        # the tree is queried with a slightly inflated radius, the exact test decides
        return self._exact(center, self._tree.query_ball_point(center, r * (1.0 + 1e-9) + 1e-300), r)

    def radius_neighbors_batch(self, centers: np.ndarray, r: float) -> List[np.ndarray]:
        """radius_neighbors for many centers at once"""
        if not r > 0.0:
            raise GeometryError(f"radius must be positive, got {r}")
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        if self._tree is None:
            return [np.zeros(0, dtype=np.int64) for _ in range(len(centers))]
        hits = self._tree.query_ball_point(centers, r * (1.0 + 1e-9) + 1e-300)
        return [self._exact(c, h, r) for c, h in zip(centers, hits)]

    def nearest(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(distances, indices) of the nearest indexed point for each query"""
        if self._tree is None:
            raise GeometryError("nearest-neighbour query on an empty index")
        return self._tree.query(np.asarray(queries, dtype=np.float64).reshape(-1, 3))


# ═══════════════════════════════════════════════════════════
# POINT-TO-TRIANGLE DISTANCE
# ═══════════════════════════════════════════════════════════

@nb.njit(cache=True)
def point_triangle_distance_sq(px, py, pz, a, b, c):
    """Squared distance from a point to a closed triangle (face, edge or vertex region)"""
    abx, aby, abz = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    acx, acy, acz = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    apx, apy, apz = px - a[0], py - a[1], pz - a[2]
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        qx, qy, qz = a[0], a[1], a[2]
    else:
        bpx, bpy, bpz = px - b[0], py - b[1], pz - b[2]
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        vc = d1 * d4 - d3 * d2
        cpx, cpy, cpz = px - c[0], py - c[1], pz - c[2]
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        if d3 >= 0.0 and d4 <= d3:
            qx, qy, qz = b[0], b[1], b[2]
        elif vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
            v = d1 / (d1 - d3)
            qx, qy, qz = a[0] + v * abx, a[1] + v * aby, a[2] + v * abz
        elif d6 >= 0.0 and d5 <= d6:
            qx, qy, qz = c[0], c[1], c[2]
        elif vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
            w = d2 / (d2 - d6)
            qx, qy, qz = a[0] + w * acx, a[1] + w * acy, a[2] + w * acz
        elif va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
            w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
            qx, qy, qz = b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2])
        else:
            denom = 1.0 / (va + vb + vc)
            v = vb * denom
            w = vc * denom
            qx = a[0] + abx * v + acx * w
            qy = a[1] + aby * v + acy * w
            qz = a[2] + abz * v + acz * w
    dx, dy, dz = px - qx, py - qy, pz - qz
    return dx * dx + dy * dy + dz * dz


@nb.njit(cache=True)
def _box_distance_sq(px, py, pz, lo, hi):
    dx = max(lo[0] - px, 0.0, px - hi[0])
    dy = max(lo[1] - py, 0.0, py - hi[1])
    dz = max(lo[2] - pz, 0.0, pz - hi[2])
    return dx * dx + dy * dy + dz * dz


@nb.njit(cache=True)
def _query_one(px, py, pz, V, F, order, box_lo, box_hi, left, right, start, count):
    best = np.inf
    stack = np.empty(128, np.int64)
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_distance_sq(px, py, pz, box_lo[node], box_hi[node]) >= best:
            continue
        if count[node] > 0:
            for i in range(start[node], start[node] + count[node]):
                t = order[i]
                d = point_triangle_distance_sq(px, py, pz, V[F[t, 0]], V[F[t, 1]], V[F[t, 2]])
                if d < best:
                    best = d
        else:
            l, r = left[node], right[node]
            dl = _box_distance_sq(px, py, pz, box_lo[l], box_hi[l])
            dr = _box_distance_sq(px, py, pz, box_lo[r], box_hi[r])
            # nearer child on top of the stack
            if dl < dr:
                stack[top] = r
                stack[top + 1] = l
            else:
                stack[top] = l
                stack[top + 1] = r
            top += 2
    return np.sqrt(best)


@nb.njit(parallel=True, cache=True)
def _query_many(P, V, F, order, box_lo, box_hi, left, right, start, count):
    out = np.empty(P.shape[0])
    for i in nb.prange(P.shape[0]):
        out[i] = _query_one(P[i, 0], P[i, 1], P[i, 2], V, F, order, box_lo, box_hi, left, right, start, count)
    return out


class TriangleBVH:
    """Bounding-volume hierarchy over mesh triangles for exact closest-surface queries"""

    def __init__(self, mesh: TriMesh, leaf_size: int = 4):
        if mesh.is_empty:
            raise GeometryError("cannot build a BVH over an empty mesh")
        self.mesh = mesh
        self.leaf_size = leaf_size
        V = mesh.vertices
        F = mesh.faces
        tri = V[F]
        self._tri_lo = tri.min(axis=1)
        self._tri_hi = tri.max(axis=1)
        self._centroids = tri.mean(axis=1)
        self._build()
        logger.debug("BVH over %d triangles: %d nodes", len(F), len(self.count))

    def _build(self) -> None:
        order = np.arange(len(self.mesh.faces), dtype=np.int64)
        lo_list, hi_list, left, right, start, count = [], [], [], [], [], []

        def new_node(s: int, e: int) -> int:
            ids = order[s:e]
            lo_list.append(self._tri_lo[ids].min(axis=0))
            hi_list.append(self._tri_hi[ids].max(axis=0))
            left.append(-1)
            right.append(-1)
            start.append(s)
            count.append(e - s)
            return len(count) - 1

        new_node(0, len(order))
        pending = [(0, 0, len(order))]
        while pending:
            node, s, e = pending.pop()
            if e - s <= self.leaf_size:
                continue
            c = self._centroids[order[s:e]]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            mid = (e - s) // 2
            part = np.argpartition(c[:, axis], mid, kind='introselect')
            order[s:e] = order[s:e][part]
            li = new_node(s, s + mid)
            ri = new_node(s + mid, e)
            left[node], right[node], count[node] = li, ri, 0
            pending.append((li, s, s + mid))
            pending.append((ri, s + mid, e))

        self.order = order
        self.box_lo = np.array(lo_list)
        self.box_hi = np.array(hi_list)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.start = np.array(start, dtype=np.int64)
        self.count = np.array(count, dtype=np.int64)

    def distances(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from each point to the nearest triangle"""
        P = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        return _query_many(P, self.mesh.vertices, self.mesh.faces, self.order, self.box_lo, self.box_hi,
                           self.left, self.right, self.start, self.count)

    def distance(self, point) -> float:
        return float(self.distances(np.asarray(point, dtype=np.float64).reshape(1, 3))[0])


def point_to_surface_distance(point, mesh: TriMesh) -> float:
    """
    Exact unsigned distance from a point to the mesh surface

    Raises:
        GeometryError: for an empty mesh
    """
    return TriangleBVH(mesh).distance(point)
