"""
Z-buffer Rasterizer
Perspective-correct depth rendering of triangle meshes with backface culling
"""
import logging
from typing import Tuple

import numba as nb
import numpy as np

from src.errors import GeometryError
from src.geometry import face_normals, project_points
from src.models import CameraPose, DepthMap, Intrinsics, TriMesh

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-6


@nb.njit(cache=True)
def _owns_edge(ax, ay, bx, by):
    # shared edges are traversed in opposite directions by their two triangles,
    # so exactly one of them owns pixels lying on the edge (top-left rule)
    dy = by - ay
    return dy > 0.0 or (dy == 0.0 and bx - ax < 0.0)


@nb.njit(cache=True)
def _rasterize(cam, faces, fx, fy, cx, cy, width, height, cull):
    depth = np.full((height, width), np.inf)
    face_id = np.full((height, width), -1, np.int64)
    for f in range(faces.shape[0]):
        ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
        za, zb, zc = cam[ia, 2], cam[ib, 2], cam[ic, 2]
        if za <= NEAR_PLANE or zb <= NEAR_PLANE or zc <= NEAR_PLANE:
            continue
        if cull:
            e1x, e1y, e1z = cam[ib, 0] - cam[ia, 0], cam[ib, 1] - cam[ia, 1], zb - za
            e2x, e2y, e2z = cam[ic, 0] - cam[ia, 0], cam[ic, 1] - cam[ia, 1], zc - za
            nx = e1y * e2z - e1z * e2y
            ny = e1z * e2x - e1x * e2z
            nz = e1x * e2y - e1y * e2x
            if nx * cam[ia, 0] + ny * cam[ia, 1] + nz * za >= 0.0:
                continue
        ax, ay = fx * cam[ia, 0] / za + cx, fy * cam[ia, 1] / za + cy
        bx, by = fx * cam[ib, 0] / zb + cx, fy * cam[ib, 1] / zb + cy
        qx, qy = fx * cam[ic, 0] / zc + cx, fy * cam[ic, 1] / zc + cy
        area = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
        if area == 0.0:
            continue
        if area < 0.0:
            bx, by, qx, qy = qx, qy, bx, by
            zb, zc = zc, zb
            area = -area
        x0 = max(int(np.ceil(min(ax, bx, qx))), 0)
        x1 = min(int(np.floor(max(ax, bx, qx))), width - 1)
        y0 = max(int(np.ceil(min(ay, by, qy))), 0)
        y1 = min(int(np.floor(max(ay, by, qy))), height - 1)
        own_bc = _owns_edge(bx, by, qx, qy)
        own_ca = _owns_edge(qx, qy, ax, ay)
        own_ab = _owns_edge(ax, ay, bx, by)
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                w0 = (qx - bx) * (py - by) - (qy - by) * (px - bx)
                w1 = (ax - qx) * (py - qy) - (ay - qy) * (px - qx)
                w2 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not own_bc) or (w1 == 0.0 and not own_ca) or (w2 == 0.0 and not own_ab):
                    continue
                inv_z = (w0 / za + w1 / zb + w2 / zc) / area
                z = 1.0 / inv_z
                if z < depth[py, px]:
                    depth[py, px] = z
                    face_id[py, px] = f
    return depth, face_id


def rasterize(mesh: TriMesh, pose: CameraPose, intr: Intrinsics, cull_backfaces: bool = True
              ) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rasterize a mesh into a Z-buffer

    Pixel centers sit at integer coordinates. Triangles with any vertex at or
    behind the near plane are skipped.

    Returns:
        (depth grid with +inf where uncovered, face index grid with -1 where uncovered)
    """
    if mesh.is_empty:
        raise GeometryError("cannot render an empty mesh")
    cam = pose.to_camera(mesh.vertices)
    return _rasterize(np.ascontiguousarray(cam), np.ascontiguousarray(mesh.faces),
                      float(intr.fx), float(intr.fy), float(intr.cx), float(intr.cy),
                      int(intr.width), int(intr.height), cull_backfaces)


def render_depth(mesh: TriMesh, pose: CameraPose, intr: Intrinsics, cull_backfaces: bool = True) -> DepthMap:
    """
    Render the nearest front-facing surface depth (z_cam) per pixel

    Args:
        mesh: Triangle mesh with outward (counter-clockwise) winding
        pose: World-to-camera pose
        intr: Intrinsics; fixes the output resolution

    Returns:
        DepthMap with camera-frame face normals on covered pixels
    """
    depth, face_id = rasterize(mesh, pose, intr, cull_backfaces)
    cam_normals = face_normals(mesh) @ pose.rotation.T
    has_normal = np.linalg.norm(cam_normals, axis=1) > 0.5
    valid = face_id >= 0
    valid[valid] = has_normal[face_id[valid]]
    depth[~valid] = np.inf
    normals = np.zeros(depth.shape + (3,))
    normals[..., 2] = -1.0
    normals[valid] = cam_normals[face_id[valid]]
    logger.debug("Rendered %d/%d pixels", int(valid.sum()), valid.size)
    return DepthMap(depth=depth, valid=valid, normal=normals)


def visible_mask(points: np.ndarray, pose: CameraPose, intr: Intrinsics, zbuffer: np.ndarray,
                 tolerance: float = 0.01, allow_uncovered: bool = False) -> np.ndarray:
    """
    Z-buffer visibility of 3D points

    A point is visible when it projects inside the image and its depth is not
    behind the rendered surface at its (rounded) pixel by more than `tolerance`
    (relative). Uncovered pixels count as visible only with `allow_uncovered`.
    """
    pix, z, in_front = project_points(pose, intr, points)
    visible = np.zeros(len(z), dtype=bool)
    cols = np.rint(pix[in_front, 0])
    rows = np.rint(pix[in_front, 1])
    inside = (cols >= 0) & (cols < intr.width) & (rows >= 0) & (rows < intr.height)
    idx = np.flatnonzero(in_front)[inside]
    zb = zbuffer[rows[inside].astype(np.int64), cols[inside].astype(np.int64)]
    covered = np.isfinite(zb)
    ok = np.where(covered, z[idx] <= zb * (1.0 + tolerance), allow_uncovered)
    visible[idx[ok]] = True
    return visible
