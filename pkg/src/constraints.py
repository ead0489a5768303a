"""
Fitting Constraints Module
Point-cloud, landmark and occluding-contour edge targets for the template fit
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config.pipeline_config import EdgeConfig, PclConstraintConfig
from src.errors import ConfigurationError, GeometryError
from src.geometry import backproject_pixels, front_facing, project_points, vertex_normals
from src.models import (
    CameraPose,
    ConstraintKind,
    ConstraintSet,
    CorrespondenceTable,
    EdgeMap,
    Intrinsics,
    Keyframe,
    Landmark3D,
    PointCloud,
    TriMesh,
)
from src.rasterizer import rasterize, visible_mask
from src.spatial import PointIndex

logger = logging.getLogger(__name__)

# perpendicular distances this close (relative to axial_threshold) count as one line sample
AXIAL_TIE_FRACTION = 1e-9


# ═══════════════════════════════════════════════════════════
# POINT CLOUD
# ═══════════════════════════════════════════════════════════

def pointcloud_targets(mesh: TriMesh, cloud: PointCloud, cfg: PclConstraintConfig) -> ConstraintSet:
    """
    Snap vertices along their normals onto the fused point cloud

    A cloud point is accepted for a vertex when it lies within search_radius
    of the vertex and within axial_threshold of the vertex-normal line. With
    at least min_points accepted points the target is the point of the normal
    line at the median normal offset of the accepted points lying closest to
    that line. A cloud sampling the mesh surface, vertices included, therefore
    reproduces every vertex. Vertices without a defined normal get no
    constraint.

    Radii left unset in cfg are taken from this mesh's bounding-box diagonal;
    fit_mesh resolves them once from the undeformed template.
    """
    if len(cloud) == 0 or mesh.n_vertices == 0:
        return ConstraintSet.empty()
    cfg = cfg.resolved(mesh.bbox_diagonal)
    normals, has_normal = vertex_normals(mesh, return_flags=True)
    index = PointIndex(cloud)
    neighbours = index.radius_neighbors_batch(mesh.vertices, cfg.search_radius)
    tie = AXIAL_TIE_FRACTION * cfg.axial_threshold

    vertex_ids: List[int] = []
    targets: List[np.ndarray] = []
    for i, idx in enumerate(neighbours):
        if not has_normal[i] or len(idx) < cfg.min_points:
            continue
        offset = cloud.points[idx] - mesh.vertices[i]
        along = offset @ normals[i]
        perpendicular = np.linalg.norm(offset - np.outer(along, normals[i]), axis=1)
        accepted = perpendicular <= cfg.axial_threshold
        if np.count_nonzero(accepted) < cfg.min_points:
            continue
        nearest = perpendicular[accepted].min()
        on_line = accepted & (perpendicular <= nearest + tie)
        vertex_ids.append(i)
        targets.append(mesh.vertices[i] + np.median(along[on_line]) * normals[i])
    logger.debug("Point-cloud constraints on %d of %d vertices", len(vertex_ids), mesh.n_vertices)
    return ConstraintSet.of(ConstraintKind.POINTCLOUD, vertex_ids, np.array(targets).reshape(-1, 3))


# ═══════════════════════════════════════════════════════════
# LANDMARKS
# ═══════════════════════════════════════════════════════════

def landmark_targets(lms3d: Sequence[Landmark3D], table: CorrespondenceTable, weight: float = 1.0) -> ConstraintSet:
    """
    One constraint per triangulated landmark, pinning its table vertex to the landmark

    Raises:
        ConfigurationError: on a landmark id absent from the table or a repeated id
    """
    ids = [lm.landmark_id for lm in lms3d]
    repeated = sorted({i for i in ids if ids.count(i) > 1})
    if repeated:
        raise ConfigurationError(f"landmark ids appear more than once: {repeated}")
    missing = sorted(i for i in ids if i not in table.entries)
    if missing:
        raise ConfigurationError(f"landmark ids missing from the correspondence table: {missing}")
    vertices = [table.entries[i] for i in ids]
    shared = sorted({v for v in vertices if vertices.count(v) > 1})
    if shared:
        raise ConfigurationError(f"several landmarks map to the same template vertices: {shared}")
    return ConstraintSet.of(ConstraintKind.LANDMARK, vertices,
                            np.array([lm.position for lm in lms3d], dtype=np.float64).reshape(-1, 3), weight)


# ═══════════════════════════════════════════════════════════
# OCCLUDING CONTOURS & EDGES
# ═══════════════════════════════════════════════════════════

def contour_edges(mesh: TriMesh, front: np.ndarray) -> np.ndarray:
    """
    Mesh edges separating front- from back-facing faces, plus boundary edges of front faces

    Args:
        mesh: Triangle mesh
        front: Per-face front-facing flags

    Returns:
        (k, 2) vertex pairs
    """
    f = mesh.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    face_of = np.tile(np.arange(len(f)), 3)
    keys, inverse = np.unique(e, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_faces = np.bincount(inverse, minlength=len(keys))
    n_front = np.bincount(inverse, weights=front[face_of].astype(np.float64), minlength=len(keys))
    n_back = n_faces - n_front
    silhouette = (n_front > 0) & (n_back > 0)
    boundary = (n_faces == 1) & (n_front == 1)
    return keys[silhouette | boundary]


def contour_vertices(mesh: TriMesh, pose: CameraPose, intr: Intrinsics, tolerance: float = 0.01) -> List[int]:
    """
    Visible vertices on the occluding contour of the mesh

    A vertex qualifies when it touches a contour edge and passes the Z-buffer
    test. Silhouette vertices usually project just off the rendered surface,
    so uncovered pixels count as visible.
    """
    if mesh.is_empty:
        raise GeometryError("contour extraction on an empty mesh")
    edges = contour_edges(mesh, front_facing(mesh, pose))
    candidates = np.unique(edges)
    if not len(candidates):
        return []
    zbuffer, _ = rasterize(mesh, pose, intr)
    visible = visible_mask(mesh.vertices[candidates], pose, intr, zbuffer, tolerance, allow_uncovered=True)
    return [int(v) for v in candidates[visible]]


def snap_to_edges(pose: CameraPose, intr: Intrinsics, points: np.ndarray, edges: EdgeMap, tau_edge_px: float
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Match projected points to their nearest edge pixel

    Returns:
        (matched mask, targets, pixel distances); a target is the matched edge
        pixel lifted to the point's own camera depth
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pix, z, in_front = project_points(pose, intr, points)
    h, w = edges.shape
    cols = np.rint(pix[:, 0])
    rows = np.rint(pix[:, 1])
    inside = in_front & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    matched = np.zeros(len(points), dtype=bool)
    targets = np.zeros((len(points), 3))
    distance = np.full(len(points), np.inf)
    if not inside.any():
        return matched, targets, distance
    r = rows[inside].astype(np.int64)
    c = cols[inside].astype(np.int64)
    nearest = edges.nearest[r, c]
    has_edge = nearest[:, 0] >= 0
    edge_px = nearest[:, ::-1].astype(np.float64)
    d = np.where(has_edge, np.linalg.norm(edge_px - pix[inside], axis=1), np.inf)
    ok = d <= tau_edge_px
    idx = np.flatnonzero(inside)[ok]
    matched[idx] = True
    distance[idx] = d[ok]
    if len(idx):
        targets[idx] = backproject_pixels(pose, intr, edge_px[ok], z[idx])
    return matched, targets, distance


def _edge_matches(mesh: TriMesh, kf: Keyframe, edges: EdgeMap, cfg: EdgeConfig):
    if edges.shape != (kf.intrinsics.height, kf.intrinsics.width):
        raise GeometryError(f"keyframe {kf.id}: edge map {edges.shape} does not match the image size")
    tau = cfg.tau_for_width(kf.intrinsics.width)
    vids = np.asarray(contour_vertices(mesh, kf.pose, kf.intrinsics), dtype=np.int64)
    if not len(vids):
        return vids, np.zeros((0, 3)), np.zeros(0)
    matched, targets, distance = snap_to_edges(kf.pose, kf.intrinsics, mesh.vertices[vids], edges, tau)
    return vids[matched], targets[matched], distance[matched]


def _match_config(tau_edge_px: Optional[float], cfg: Optional[EdgeConfig]) -> EdgeConfig:
    cfg = cfg or EdgeConfig()
    return cfg if tau_edge_px is None else cfg.model_copy(update={"tau_edge_px": tau_edge_px})


def edge_targets(mesh: TriMesh, kf: Keyframe, edges: EdgeMap, tau_edge_px: Optional[float] = None,
                 cfg: Optional[EdgeConfig] = None) -> ConstraintSet:
    """
    Edge constraints for one keyframe

    Args:
        mesh: Current deformed mesh
        kf: Keyframe
        edges: Edge map of the keyframe image
        tau_edge_px: Match radius in pixels; overrides cfg
        cfg: Edge config; without an explicit tau the radius scales with the image width

    Returns:
        ConstraintSet of kind EDGE
    """
    vids, targets, _ = _edge_matches(mesh, kf, edges, _match_config(tau_edge_px, cfg))
    return ConstraintSet.of(ConstraintKind.EDGE, vids, targets)


def edge_targets_multi(mesh: TriMesh, keyframes: Sequence[Keyframe], edge_maps: Sequence[EdgeMap],
                       tau_edge_px: Optional[float] = None, cfg: Optional[EdgeConfig] = None) -> ConstraintSet:
    """
    Edge constraints across keyframes

    The match radius is resolved per keyframe from its image width. A vertex
    matched in several keyframes keeps the match with the smallest pixel
    distance, ties going to the lower keyframe id.
    """
    if len(keyframes) != len(edge_maps):
        raise GeometryError(f"{len(keyframes)} keyframes but {len(edge_maps)} edge maps")
    cfg = _match_config(tau_edge_px, cfg)
    best_d = np.full(mesh.n_vertices, np.inf)
    best_target = np.zeros((mesh.n_vertices, 3))
    for kf, em in sorted(zip(keyframes, edge_maps), key=lambda pair: pair[0].id):
        vids, targets, distance = _edge_matches(mesh, kf, em, cfg)
        better = distance < best_d[vids]
        best_d[vids[better]] = distance[better]
        best_target[vids[better]] = targets[better]
    chosen = np.flatnonzero(np.isfinite(best_d))
    logger.debug("Edge constraints on %d vertices from %d keyframes", len(chosen), len(keyframes))
    return ConstraintSet.of(ConstraintKind.EDGE, chosen, best_target[chosen])
