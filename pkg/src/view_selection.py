"""
View Selection Module
Pairwise keyframe scores from baseline angles and source-view selection for MVS
"""
import logging
import math
from typing import Dict, List, Sequence, Tuple

import numpy as np

from config.pipeline_config import ViewSelConfig
from src.errors import GeometryError
from src.models import Keyframe, TriMesh
from src.rasterizer import rasterize, visible_mask

logger = logging.getLogger(__name__)


def gaussian_weight(theta: float, cfg: ViewSelConfig) -> float:
    """
    Piecewise Gaussian over the baseline angle, peaking at theta0

    Args:
        theta: Baseline angle in degrees, [0, 180]
        cfg: Provides theta0, sigma1 (left branch) and sigma2 (right branch)

    Returns:
        Weight in (0, 1]
    """
    if not 0.0 <= theta <= 180.0:
        raise GeometryError(f"baseline angle must lie in [0, 180] degrees, got {theta}")
    sigma = cfg.sigma1 if theta <= cfg.theta0 else cfg.sigma2
    return math.exp(-((theta - cfg.theta0) ** 2) / (2.0 * sigma ** 2))


def _gaussian_weights(theta: np.ndarray, cfg: ViewSelConfig) -> np.ndarray:
    sigma = np.where(theta <= cfg.theta0, cfg.sigma1, cfg.sigma2)
    return np.exp(-((theta - cfg.theta0) ** 2) / (2.0 * sigma ** 2))


def _baseline_angles(c_i: np.ndarray, c_j: np.ndarray, points: np.ndarray) -> np.ndarray:
    a = c_i - points
    b = c_j - points
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if na.size and (na.min() <= 1e-12 or nb.min() <= 1e-12):
        raise GeometryError("point coincides with a camera center")
    cos = np.einsum('ij,ij->i', a / na[:, None], b / nb[:, None])
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def baseline_angle(c_i, c_j, p) -> float:
    """
    Angle in degrees subtended at p by two camera centers

    The rays (c_i - p) and (c_j - p) are normalized before the dot product.
    """
    return float(_baseline_angles(np.asarray(c_i, float), np.asarray(c_j, float),
                                  np.asarray(p, float).reshape(1, 3))[0])


def pair_score(kf_i: Keyframe, kf_j: Keyframe, shared_points: Sequence, cfg: ViewSelConfig) -> float:
    """
    Sum of piecewise-Gaussian weights of baseline angles over shared points

    The sum is exactly rounded, so it does not depend on point order.
    """
    points = np.asarray(shared_points, dtype=np.float64).reshape(-1, 3)
    if not len(points):
        return 0.0
    theta = _baseline_angles(kf_i.pose.center, kf_j.pose.center, points)
    return math.fsum(_gaussian_weights(theta, cfg))


def visibility_masks(keyframes: List[Keyframe], mesh: TriMesh, tolerance: float = 0.01) -> np.ndarray:
    """(n_keyframes, n_vertices) Z-buffer visibility of mesh vertices"""
    masks = np.zeros((len(keyframes), mesh.n_vertices), dtype=bool)
    for k, kf in enumerate(keyframes):
        zbuffer, _ = rasterize(mesh, kf.pose, kf.intrinsics)
        masks[k] = visible_mask(mesh.vertices, kf.pose, kf.intrinsics, zbuffer, tolerance)
    return masks


def score_matrix(keyframes: List[Keyframe], prior_mesh: TriMesh, cfg: ViewSelConfig
                 ) -> Tuple[List[int], np.ndarray]:
    """Symmetric pair-score matrix over the prior-mesh vertices visible in both views"""
    masks = visibility_masks(keyframes, prior_mesh, cfg.visibility_tolerance)
    n = len(keyframes)
    scores = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            shared = prior_mesh.vertices[masks[i] & masks[j]]
            scores[i, j] = scores[j, i] = pair_score(keyframes[i], keyframes[j], shared, cfg)
    return [kf.id for kf in keyframes], scores


def select_source_views(keyframes: List[Keyframe], prior_mesh: TriMesh, cfg: ViewSelConfig
                        ) -> Dict[int, List[int]]:
    """
    Pick the num_sources best-scoring other keyframes for every reference view

    Args:
        keyframes: At least two keyframes
        prior_mesh: Coarse mesh in the keyframe coordinate frame
        cfg: View selection config

    Returns:
        reference id -> source ids, best first; ties broken by ascending id
    """
    if len(keyframes) < 2:
        raise GeometryError(f"view selection needs at least 2 keyframes, got {len(keyframes)}")
    ids, scores = score_matrix(keyframes, prior_mesh, cfg)
    selection: Dict[int, List[int]] = {}
    for i, ref_id in enumerate(ids):
        candidates = sorted((j for j in range(len(ids)) if j != i), key=lambda j: (-scores[i, j], ids[j]))
        selection[ref_id] = [ids[j] for j in candidates[:cfg.num_sources]]
        logger.debug("Reference %d -> sources %s", ref_id, selection[ref_id])
    logger.info("Selected up to %d source views for %d references", cfg.num_sources, len(ids))
    return selection
