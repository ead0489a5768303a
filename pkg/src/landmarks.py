"""
Landmark Triangulation and Alignment Module
Reprojection-error triangulation of 2D landmark tracks and template alignment
"""
import logging
from collections import defaultdict
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import least_squares

from config.pipeline_config import LandmarkConfig
from src.errors import GeometryError, TriangulationError
from src.geometry import umeyama
from src.models import (
    EAR_ID_BASE,
    JAW_CONTOUR_IDS,
    CorrespondenceTable,
    Keyframe,
    Landmark3D,
    LandmarkObservation,
    TriMesh,
)
from src.spatial import PointIndex

logger = logging.getLogger(__name__)

RAY_RANK_TOLERANCE = 1e-12

KeyframeLookup = Union[Mapping[int, Keyframe], Sequence[Keyframe]]


def _by_id(keyframes: KeyframeLookup) -> Dict[int, Keyframe]:
    if isinstance(keyframes, Mapping):
        return dict(keyframes)
    return {kf.id: kf for kf in keyframes}


class _Rig:
    """Stacked cameras and pixel observations of one landmark"""

    def __init__(self, observations: List[LandmarkObservation], frames: Dict[int, Keyframe]):
        self.R = np.array([frames[o.frame_id].pose.rotation for o in observations])
        self.t = np.array([frames[o.frame_id].pose.translation for o in observations])
        self.f = np.array([[frames[o.frame_id].intrinsics.fx, frames[o.frame_id].intrinsics.fy]
                           for o in observations])
        self.c = np.array([[frames[o.frame_id].intrinsics.cx, frames[o.frame_id].intrinsics.cy]
                           for o in observations])
        self.x = np.array([o.position for o in observations], dtype=np.float64)

    def camera_points(self, X: np.ndarray) -> np.ndarray:
        return np.einsum('kij,j->ki', self.R, X) + self.t

    def residuals(self, X: np.ndarray) -> np.ndarray:
        cam = self.camera_points(X)
        proj = self.f * cam[:, :2] / cam[:, 2:3] + self.c
        return (proj - self.x).ravel()

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        cam = self.camera_points(X)
        z = cam[:, 2:3]
        # d(u, v)/dX = f * (R_row / z - (x, y) * R_z / z^2)
        du = self.f[:, 0:1] * (self.R[:, 0, :] / z - cam[:, 0:1] * self.R[:, 2, :] / z ** 2)
        dv = self.f[:, 1:2] * (self.R[:, 1, :] / z - cam[:, 1:2] * self.R[:, 2, :] / z ** 2)
        return np.stack([du, dv], axis=1).reshape(-1, 3)

    def linear_estimate(self) -> np.ndarray:
        """Homogeneous least squares over the stacked projection constraints"""
        rows = []
        for R, t, f, c, x in zip(self.R, self.t, self.f, self.c, self.x):
            P = np.diag([f[0], f[1], 1.0]) @ np.hstack([R, t[:, None]])
            P[0] += c[0] * P[2]
            P[1] += c[1] * P[2]
            for k in range(2):
                row = x[k] * P[2] - P[k]
                rows.append(row / np.linalg.norm(row))
        _, s, vt = np.linalg.svd(np.array(rows))
        # a second null direction means the rays are collinear
        if s[-2] <= RAY_RANK_TOLERANCE * s[0]:
            raise GeometryError("observation rays are collinear")
        h = vt[-1]
        if abs(h[3]) < 1e-15:
            raise GeometryError("linear triangulation returned a point at infinity")
        return h[:3] / h[3]


def _huber_cost(r: np.ndarray, delta: float) -> float:
    a = np.abs(r)
    return float(np.sum(np.where(a <= delta, a ** 2, 2.0 * delta * a - delta ** 2)))


def reprojection_cost(X, observations: List[LandmarkObservation], keyframes: KeyframeLookup) -> float:
    """Sum of squared pixel reprojection distances"""
    r = _Rig(list(observations), _by_id(keyframes)).residuals(np.asarray(X, dtype=np.float64))
    return float(r @ r)


def reprojection_gradient(X, observations: List[LandmarkObservation], keyframes: KeyframeLookup) -> np.ndarray:
    """Analytic gradient of reprojection_cost with respect to X"""
    rig = _Rig(list(observations), _by_id(keyframes))
    X = np.asarray(X, dtype=np.float64)
    return 2.0 * rig.jacobian(X).T @ rig.residuals(X)


def triangulate_landmark(observations: Iterable[LandmarkObservation], keyframes: KeyframeLookup,
                         min_confidence: float = 0.9, robust: bool = False, huber_px: float = 2.0,
                         max_iterations: int = 100) -> Landmark3D:
    """
    Triangulate one landmark from its 2D observations

    Args:
        observations: Observations of a single landmark id
        keyframes: Keyframes (or id -> keyframe) the observations refer to
        min_confidence: Observations below this confidence are ignored
        robust: Huber loss (scale huber_px) instead of plain squared error
        huber_px: Huber transition in pixels
        max_iterations: Cap on refinement iterations

    Returns:
        Landmark3D; refinement never ends above the linear estimate's cost

    Raises:
        TriangulationError: fewer than 2 confident views, or the estimate lies
            behind a contributing camera
    """
    observations = list(observations)
    ids = {o.landmark_id for o in observations}
    if len(ids) > 1:
        raise ValueError(f"observations mix landmark ids {sorted(ids)}")
    landmark_id = ids.pop() if ids else -1
    frames = _by_id(keyframes)
    unknown = sorted({o.frame_id for o in observations} - set(frames))
    if unknown:
        raise TriangulationError(landmark_id, f"unknown keyframes {unknown}")

    # order-independent processing
    kept = sorted((o for o in observations if o.confidence >= min_confidence),
                  key=lambda o: (o.frame_id, o.position))
    if len({o.frame_id for o in kept}) < 2:
        raise TriangulationError(landmark_id, f"{len(kept)} confident view(s), need at least 2")

    rig = _Rig(kept, frames)
    try:
        X0 = rig.linear_estimate()
    except GeometryError as e:
        raise TriangulationError(landmark_id, str(e)) from e
    if np.any(rig.camera_points(X0)[:, 2] <= 0.0):
        raise TriangulationError(landmark_id, "linear estimate lies behind a contributing camera")

    def objective(X):
        r = rig.residuals(X)
        return _huber_cost(r, huber_px) if robust else float(r @ r)

    if robust:
        result = least_squares(rig.residuals, X0, jac=rig.jacobian, method='trf', loss='huber',
                               f_scale=huber_px, ftol=1e-12, xtol=1e-12, gtol=1e-12, max_nfev=max_iterations)
    else:
        result = least_squares(rig.residuals, X0, jac=rig.jacobian, method='lm',
                               ftol=1e-12, xtol=1e-12, gtol=1e-12, max_nfev=max_iterations)
    X = result.x
    if (not np.all(np.isfinite(X)) or np.any(rig.camera_points(X)[:, 2] <= 0.0)
            or objective(X) > objective(X0)):
        logger.debug("Landmark %d: refinement rejected, keeping the linear estimate", landmark_id)
        X = X0
    r = rig.residuals(X).reshape(-1, 2)
    rms = float(np.sqrt(np.mean(np.sum(r ** 2, axis=1))))
    return Landmark3D(landmark_id=landmark_id, position=tuple(float(v) for v in X),
                      rms_reprojection_error=rms, num_views=len(kept))


def used_landmark_ids(ids: Iterable[int], table: Optional[CorrespondenceTable] = None,
                      use_ear_landmarks: bool = True) -> List[int]:
    """Landmark ids that take part in fitting, ascending"""
    out = []
    for lid in sorted(set(ids)):
        if table is not None:
            if not table.is_used(lid):
                continue
        elif lid in JAW_CONTOUR_IDS:
            continue
        if lid >= EAR_ID_BASE and not use_ear_landmarks:
            continue
        out.append(lid)
    return out


def triangulate_all(obs: Iterable[LandmarkObservation], keyframes: KeyframeLookup, cfg: LandmarkConfig,
                    table: Optional[CorrespondenceTable] = None, use_ear_landmarks: bool = True
                    ) -> List[Landmark3D]:
    """
    Triangulate every used landmark id

    Contour ids excluded by the table (jaw contour 0-16 by default) and ear ids
    outside the table's outer-contour subset are skipped. Landmarks that fail
    are logged and omitted.

    Returns:
        Landmark3D list sorted by id
    """
    frames = _by_id(keyframes)
    tracks: Dict[int, List[LandmarkObservation]] = defaultdict(list)
    for o in obs:
        tracks[o.landmark_id].append(o)

    results: List[Landmark3D] = []
    dropped = 0
    for lid in used_landmark_ids(tracks, table, use_ear_landmarks):
        track = tracks[lid]
        dropped += sum(1 for o in track if o.confidence < cfg.min_confidence)
        try:
            results.append(triangulate_landmark(track, frames, cfg.min_confidence, cfg.robust,
                                                cfg.huber_px, cfg.max_iterations))
        except TriangulationError as e:
            logger.warning("Skipping %s", e)
    logger.info("Triangulated %d landmarks (%d low-confidence observations ignored)", len(results), dropped)
    return results


# ═══════════════════════════════════════════════════════════
# ALIGNMENT
# ═══════════════════════════════════════════════════════════

def similarity_align(template: TriMesh, table: CorrespondenceTable, lms3d: List[Landmark3D],
                     use_ear_landmarks: bool = False) -> Tuple[TriMesh, float, np.ndarray, np.ndarray]:
    """
    Align the template to triangulated landmarks with a similarity transform

    Only face landmarks are used unless use_ear_landmarks is set; ear
    landmarks otherwise constrain the non-rigid fit alone.

    Args:
        template: Template mesh
        table: landmark id -> template vertex
        lms3d: Triangulated landmarks
        use_ear_landmarks: Include ear ids in the similarity estimate

    Returns:
        (aligned mesh, scale, rotation, translation) with aligned = s * R @ v + t

    Raises:
        GeometryError: fewer than 3 correspondences or a collinear configuration
    """
    table.check_against(template)
    pairs = sorted((lm.landmark_id, table.entries[lm.landmark_id], lm.position)
                   for lm in lms3d if lm.landmark_id in table.entries
                   and (use_ear_landmarks or lm.landmark_id < EAR_ID_BASE))
    if len(pairs) < 3:
        raise GeometryError(f"similarity alignment needs 3 correspondences, got {len(pairs)}")
    source = template.vertices[[p[1] for p in pairs]]
    target = np.array([p[2] for p in pairs], dtype=np.float64)
    scale, R, t, spread = umeyama(source, target)
    if spread[0] <= 0.0 or spread[1] < 1e-9 * spread[0]:
        raise GeometryError("landmark correspondences are collinear")
    aligned = template.with_vertices(scale * template.vertices @ R.T + t)
    rms = float(np.sqrt(np.mean(np.sum((scale * source @ R.T + t - target) ** 2, axis=1))))
    logger.info("Similarity alignment over %d landmarks: scale %.6g, rms %.6g", len(pairs), scale, rms)
    return aligned, scale, R, t


def rigid_align(source: TriMesh, target: TriMesh, iterations: int = 20
                ) -> Tuple[TriMesh, np.ndarray, np.ndarray]:
    """
    Rigid ICP of source vertices onto nearest target vertices

    Returns:
        (aligned source, rotation, translation); never scales
    """
    if source.n_vertices == 0 or target.n_vertices == 0:
        raise GeometryError("rigid alignment of an empty mesh")
    index = PointIndex(target.vertices)
    current = source.vertices.copy()
    R = np.eye(3)
    t = np.zeros(3)
    previous = np.inf
    for it in range(iterations):
        dist, idx = index.nearest(current)
        rms = float(np.sqrt(np.mean(dist ** 2)))
        if abs(previous - rms) < 1e-10:
            break
        previous = rms
        _, R_i, t_i, _ = umeyama(current, target.vertices[idx], with_scale=False)
        current = current @ R_i.T + t_i
        R = R_i @ R
        t = R_i @ t + t_i
        logger.debug("ICP iteration %d: rms %.6g", it, rms)
    return source.with_vertices(current), R, t
