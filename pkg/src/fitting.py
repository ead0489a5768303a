"""
Non-rigid Template Fitting Module
Per-vertex affine deformation under stiffness, point-cloud, landmark and edge terms
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from tqdm import tqdm

from config.pipeline_config import EdgeConfig, FitConfig, PclConstraintConfig
from src.constraints import edge_targets_multi, landmark_targets, pointcloud_targets
from src.errors import GeometryError, SolverError
from src.models import (
    EAR_ID_BASE,
    ConstraintKind,
    ConstraintSet,
    CorrespondenceTable,
    EdgeMap,
    EnergyRecord,
    Keyframe,
    Landmark3D,
    PointCloud,
    TriMesh,
    VertexTransforms,
)
from src.rasterizer import rasterize, visible_mask

logger = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-12


@dataclass
class FitSystem:
    """Sparse least-squares system A X = B with A: (4|E| + k) x 4n, B: (4|E| + k) x 3"""

    A: sp.csr_matrix
    B: np.ndarray
    n_vertices: int
    n_stiffness_rows: int
    row_kind: np.ndarray

    def energy(self, X: np.ndarray) -> float:
        """||A X - B||_F^2"""
        r = self.A @ X - self.B
        return float(np.sum(r * r))

    def energy_terms(self, X: np.ndarray) -> dict:
        """Squared residuals of the stiffness block and of each data kind"""
        r = self.A @ X - self.B
        sq = np.sum(r * r, axis=1)
        s = self.n_stiffness_rows
        data = sq[s:]
        return {
            "e_reg": float(sq[:s].sum()),
            "e_pcl": float(data[self.row_kind == ConstraintKind.POINTCLOUD].sum()),
            "e_lms": float(data[self.row_kind == ConstraintKind.LANDMARK].sum()),
            "e_edges": float(data[self.row_kind == ConstraintKind.EDGE].sum()),
        }


def assemble_system(mesh: TriMesh, constraints: ConstraintSet, stiffness: float, lm_weight: float,
                    edge_weight: float, gamma_skew: float = 1.0) -> FitSystem:
    """
    Build the stiffness and data blocks of the fitting system

    Args:
        mesh: Undeformed template; data rows use its vertex positions
        constraints: Targets, at most one per (vertex, kind)
        stiffness: Weight of the edge-difference rows
        lm_weight: Extra weight of landmark rows
        edge_weight: Extra weight of edge rows
        gamma_skew: Weight of the translation row inside the stiffness block

    Returns:
        FitSystem
    """
    n = mesh.n_vertices
    if len(constraints) == 0 and stiffness == 0.0:
        raise SolverError("no constraints and zero stiffness: the system is singular")
    if len(constraints) and constraints.vertex_index.max() >= n:
        raise GeometryError("constraint references a vertex outside the mesh")

    edges = mesh.edges
    m = len(edges)
    g = np.array([1.0, 1.0, 1.0, gamma_skew])
    # stiffness rows: 4 per edge, +G at X_u, -G at X_v
    rows = np.repeat(np.arange(4 * m), 2)
    k = np.tile(np.arange(4), m)
    cols_u = 4 * np.repeat(edges[:, 0], 4) + k
    cols_v = 4 * np.repeat(edges[:, 1], 4) + k
    s_cols = np.stack([cols_u, cols_v], axis=1).ravel()
    s_vals = np.stack([stiffness * g[k], -stiffness * g[k]], axis=1).ravel()

    kind_scale = np.ones(3)
    kind_scale[ConstraintKind.LANDMARK] = lm_weight
    kind_scale[ConstraintKind.EDGE] = edge_weight
    w = constraints.weight * kind_scale[constraints.kind]
    c = len(constraints)
    d_rows = np.repeat(4 * m + np.arange(c), 4)
    d_cols = (4 * np.repeat(constraints.vertex_index, 4) + np.tile(np.arange(4), c))
    homogeneous = np.hstack([mesh.vertices[constraints.vertex_index], np.ones((c, 1))])
    d_vals = (homogeneous * w[:, None]).ravel()

    A = sp.csr_matrix((np.concatenate([s_vals, d_vals]),
                       (np.concatenate([rows, d_rows]), np.concatenate([s_cols, d_cols]))),
                      shape=(4 * m + c, 4 * n))
    B = np.zeros((4 * m + c, 3))
    B[4 * m:] = constraints.target * w[:, None]
    return FitSystem(A=A, B=B, n_vertices=n, n_stiffness_rows=4 * m, row_kind=constraints.kind.copy())


def solve_step(system: FitSystem) -> VertexTransforms:
    """
    Least-squares solve through the normal equations A^T A X = A^T B

    Raises:
        SolverError: when the normal matrix is rank deficient
    """
    N = (system.A.T @ system.A).tocsc()
    rhs = system.A.T @ system.B
    diag = N.diagonal()
    scale = diag.max() if diag.size else 0.0
    if scale <= 0.0:
        raise SolverError("normal matrix is zero")
    empty = np.flatnonzero(diag < PIVOT_TOLERANCE * scale)
    if len(empty):
        raise SolverError(f"rank-deficient system: {len(empty)} unknowns of vertex {empty[0] // 4} "
                          f"are unconstrained")
    try:
        lu = splu(N, permc_spec='MMD_AT_PLUS_A', diag_pivot_thresh=0.0, options={'SymmetricMode': True})
    except RuntimeError as e:
        raise SolverError(f"factorization failed: {e}") from e
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() < PIVOT_TOLERANCE * pivots.max():
        raise SolverError(f"rank-deficient system: pivot {pivots.min():.3e} below {PIVOT_TOLERANCE:g} of "
                          f"the largest ({pivots.max():.3e}); some vertices lack constraints")
    X = lu.solve(np.asarray(rhs))
    if not np.all(np.isfinite(X)):
        raise SolverError("solution is not finite")
    return VertexTransforms(matrix=X)


def apply_transforms(mesh: TriMesh, X: VertexTransforms) -> TriMesh:
    """v'_i = X_i^T [v_i; 1]; topology unchanged"""
    if X.n_vertices != mesh.n_vertices:
        raise GeometryError(f"{X.n_vertices} transforms for {mesh.n_vertices} vertices")
    homogeneous = np.hstack([mesh.vertices, np.ones((mesh.n_vertices, 1))])
    return mesh.with_vertices(np.einsum('ni,nij->nj', homogeneous, X.blocks))


def stiffness_energy(mesh: TriMesh, X: VertexTransforms, gamma_skew: float = 1.0) -> float:
    """Sum over mesh edges of ||G (X_u - X_v)||_F^2, unweighted by stiffness"""
    g = np.array([1.0, 1.0, 1.0, gamma_skew])
    diff = X.blocks[mesh.edges[:, 0]] - X.blocks[mesh.edges[:, 1]]
    return float(np.sum((g[None, :, None] * diff) ** 2))


def _max_change(previous: VertexTransforms, current: VertexTransforms, diagonal: float) -> float:
    delta = current.blocks - previous.blocks
    delta[:, 3, :] /= diagonal
    return float(np.sqrt(np.sum(delta ** 2, axis=(1, 2))).max())


def fit_mesh(template: TriMesh, cloud: PointCloud, lms3d: Sequence[Landmark3D], table: CorrespondenceTable,
             keyframes: Sequence[Keyframe], edge_maps: Optional[Sequence[EdgeMap]], cfg: FitConfig,
             pcl_cfg: Optional[PclConstraintConfig] = None, edge_cfg: Optional[EdgeConfig] = None
             ) -> Tuple[TriMesh, List[EnergyRecord]]:
    """
    Deform the aligned template onto the reconstruction cues

    Stages follow the stiffness and landmark weight schedules. Point-cloud and
    edge constraints are recomputed from the current deformed mesh every
    refresh_every inner iterations; landmark constraints stay fixed.

    Args:
        template: Template aligned to the keyframe frame
        cloud: Fused point cloud
        lms3d: Triangulated landmarks
        table: landmark id -> template vertex
        keyframes: Keyframes for edge constraints
        edge_maps: One edge map per keyframe, or None
        cfg: Fit config
        pcl_cfg: Point-cloud constraint config
        edge_cfg: Edge config (match radius)

    Returns:
        (fitted mesh, energy log with one record per inner iteration)
    """
    # radii fixed by the undeformed template, not the deforming mesh
    pcl_cfg = (pcl_cfg or PclConstraintConfig()).resolved(template.bbox_diagonal)
    edge_cfg = edge_cfg or EdgeConfig()
    if not cfg.use_ear_landmarks:
        lms3d = [lm for lm in lms3d if lm.landmark_id < EAR_ID_BASE]
    if len(cloud) == 0 and not lms3d:
        raise GeometryError("fitting needs a point cloud or landmarks; both are empty")
    table.check_against(template)
    landmarks = landmark_targets(lms3d, table)
    use_edges = cfg.use_edges and edge_maps is not None and len(keyframes) > 0

    diagonal = template.bbox_diagonal
    X = VertexTransforms.identity(template.n_vertices)
    current = template
    log: List[EnergyRecord] = []
    constraints = landmarks
    schedule = list(zip(cfg.stiffness_schedule, cfg.landmark_weight_schedule))
    quiet = logger.getEffectiveLevel() > logging.INFO
    for stage, (stiffness, lm_weight) in enumerate(tqdm(schedule, desc="Fitting", disable=quiet)):
        for it in range(cfg.inner_max_iters):
            if it % cfg.refresh_every == 0:
                pcl = pointcloud_targets(current, cloud, pcl_cfg)
                edges = ConstraintSet.empty()
                if use_edges:
                    edges = edge_targets_multi(current, keyframes, edge_maps, cfg=edge_cfg)
                constraints = ConstraintSet.merge(pcl, landmarks, edges)
            system = assemble_system(template, constraints, stiffness, lm_weight, cfg.edge_weight, cfg.gamma_skew)
            before = system.energy(X.matrix)
            X_new = solve_step(system)
            change = _max_change(X, X_new, diagonal)
            X = X_new
            current = apply_transforms(template, X)
            terms = system.energy_terms(X.matrix)
            log.append(EnergyRecord(stage=stage, iteration=it, stiffness=stiffness, landmark_weight=lm_weight,
                                    n_pcl=constraints.count(ConstraintKind.POINTCLOUD),
                                    n_lms=constraints.count(ConstraintKind.LANDMARK),
                                    n_edges=constraints.count(ConstraintKind.EDGE),
                                    max_change=change, energy_before=before, **terms))
            logger.debug("Stage %d iteration %d: energy %.6g (pcl %d, lms %d, edges %d), change %.3g",
                         stage, it, log[-1].total, log[-1].n_pcl, log[-1].n_lms, log[-1].n_edges, change)
            if change < cfg.inner_tol:
                break
    logger.info("Fit finished after %d solves", len(log))
    return current, log


def colorize_mesh(mesh: TriMesh, keyframes: Sequence[Keyframe], tolerance: float = 0.01) -> np.ndarray:
    """
    Per-vertex mean color over the keyframes that see the vertex

    Unseen vertices are mid-grey.
    """
    acc = np.zeros((mesh.n_vertices, 3))
    hits = np.zeros(mesh.n_vertices)
    for kf in keyframes:
        zbuffer, _ = rasterize(mesh, kf.pose, kf.intrinsics)
        seen = visible_mask(mesh.vertices, kf.pose, kf.intrinsics, zbuffer, tolerance)
        if not seen.any():
            continue
        cam = kf.pose.to_camera(mesh.vertices[seen])
        cols = np.rint(kf.intrinsics.fx * cam[:, 0] / cam[:, 2] + kf.intrinsics.cx).astype(np.int64)
        rows = np.rint(kf.intrinsics.fy * cam[:, 1] / cam[:, 2] + kf.intrinsics.cy).astype(np.int64)
        img = np.asarray(kf.image)
        scale = 1.0 if np.issubdtype(img.dtype, np.integer) else 255.0
        px = img[rows, cols].astype(np.float64) * scale
        if px.ndim == 1:
            px = np.repeat(px[:, None], 3, axis=1)
        acc[seen] += px[:, :3]
        hits[seen] += 1
    colors = np.full((mesh.n_vertices, 3), 128.0)
    seen_any = hits > 0
    colors[seen_any] = acc[seen_any] / hits[seen_any, None]
    return np.clip(np.rint(colors), 0, 255).astype(np.uint8)
