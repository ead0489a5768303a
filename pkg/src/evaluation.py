"""
Evaluation Module
Accuracy / completion surface distances and error heatmaps
"""
import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb

from src.errors import GeometryError
from src.io_formats import save_mesh
from src.models import MetricStats, TriMesh
from src.spatial import TriangleBVH

logger = logging.getLogger(__name__)

# hue of the zero-error and saturated-error colors, degrees
HUE_NEAR = 240.0
HUE_FAR = 0.0


def metric_stats(distances: np.ndarray) -> MetricStats:
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        return MetricStats(mean=0.0, std_dev=0.0, median=0.0, max=0.0, count=0)
    return MetricStats(mean=float(d.mean()), std_dev=float(d.std()), median=float(np.median(d)),
                       max=float(d.max()), count=int(d.size))


def _surface_distances(points_of: TriMesh, surface: TriMesh) -> np.ndarray:
    if points_of.n_vertices == 0 or surface.is_empty:
        raise GeometryError("evaluation needs two non-empty meshes")
    return TriangleBVH(surface).distances(points_of.vertices)


def accuracy(recon: TriMesh, gt: TriMesh) -> Tuple[MetricStats, np.ndarray]:
    """
    Distance from every reconstructed vertex to the ground-truth surface

    Returns:
        (stats, per-vertex distances)
    """
    d = _surface_distances(recon, gt)
    stats = metric_stats(d)
    logger.info("Accuracy: mean %.6g, median %.6g", stats.mean, stats.median)
    return stats, d


def completion(recon: TriMesh, gt: TriMesh) -> Tuple[MetricStats, np.ndarray]:
    """Distance from every ground-truth vertex to the reconstructed surface"""
    d = _surface_distances(gt, recon)
    stats = metric_stats(d)
    logger.info("Completion: mean %.6g, median %.6g", stats.mean, stats.median)
    return stats, d


def error_colors(distances: np.ndarray, d_max: float) -> np.ndarray:
    """
    Blue-to-red color map

    Hue falls linearly from 240 deg at d = 0 to 0 deg at d >= d_max, at full
    saturation and value, so hue is monotone in the clamped distance.
    """
    if not d_max > 0.0:
        raise ValueError(f"d_max must be positive, got {d_max}")
    t = np.clip(np.asarray(distances, dtype=np.float64) / d_max, 0.0, 1.0)
    hues = (HUE_NEAR + (HUE_FAR - HUE_NEAR) * t) / 360.0
    hsv = np.stack([hues, np.ones_like(hues), np.ones_like(hues)], axis=-1).reshape(-1, 3)
    rgb = hsv_to_rgb(hsv)
    return np.rint(rgb * 255.0).astype(np.uint8)


def error_heatmap(mesh: TriMesh, distances: np.ndarray, d_max: float,
                  path: Union[str, Path, None] = None) -> TriMesh:
    """
    Color the mesh by per-vertex error and optionally write it as binary PLY

    Raises:
        GeometryError: when distances and vertices differ in number
    """
    distances = np.asarray(distances, dtype=np.float64).reshape(-1)
    if len(distances) != mesh.n_vertices:
        raise GeometryError(f"{len(distances)} distances for {mesh.n_vertices} vertices")
    colored = mesh.with_colors(error_colors(distances, d_max))
    if path is not None:
        save_mesh(path, colored, binary=True)
    return colored
