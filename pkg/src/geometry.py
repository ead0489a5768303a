"""
Camera Geometry Module
Pinhole projection, back-projection and mesh normals
"""
import logging
from typing import Tuple, Union

import numpy as np

from src.errors import GeometryError
from src.models import CameraPose, Intrinsics, TriMesh

logger = logging.getLogger(__name__)

PLACEHOLDER_NORMAL = np.array([0.0, 0.0, 1.0])

_warned_distortion = set()


def warn_if_distorted(intr: Intrinsics, label: Union[int, str] = "") -> None:
    """Images are assumed pre-undistorted; nonzero k1/k2 are reported once and ignored"""
    if intr.has_distortion and label not in _warned_distortion:
        _warned_distortion.add(label)
        logger.warning("Ignoring radial distortion k1=%g k2=%g for camera %s (images must be undistorted)",
                       intr.k1, intr.k2, label)


def project(pose: CameraPose, intr: Intrinsics, X) -> Tuple[np.ndarray, float]:
    """
    Project a world point to pixel coordinates

    Args:
        pose: World-to-camera pose
        intr: Pinhole intrinsics
        X: World point (3,)

    Returns:
        (pixel (u, v), depth z_cam); the pixel may lie outside the image

    Raises:
        GeometryError: if the point is not in front of the camera
    """
    x, y, z = pose.rotation @ np.asarray(X, dtype=np.float64) + pose.translation
    if not z > 0.0:
        raise GeometryError(f"point {tuple(np.asarray(X, float))} is behind the camera (z_cam={z:.6g})")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy]), float(z)


def backproject(pose: CameraPose, intr: Intrinsics, pixel, depth: float) -> np.ndarray:
    """
    Lift a pixel at camera depth `depth` back to world coordinates

    Raises:
        GeometryError: if depth is not positive
    """
    if not depth > 0.0:
        raise GeometryError(f"back-projection depth must be positive, got {depth}")
    u, v = pixel
    x_cam = np.array([(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, depth])
    return pose.rotation.T @ (x_cam - pose.translation)


def project_points(pose: CameraPose, intr: Intrinsics, points: np.ndarray
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection: (pixels (k, 2), depths (k,), in_front mask (k,))

    Pixels of points behind the camera are set to +inf rather than NaN.
    """
    cam = np.asarray(points, dtype=np.float64) @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    in_front = z > 0.0
    pix = np.full((len(cam), 2), np.inf)
    zf = z[in_front]
    pix[in_front, 0] = intr.fx * cam[in_front, 0] / zf + intr.cx
    pix[in_front, 1] = intr.fy * cam[in_front, 1] / zf + intr.cy
    return pix, z, in_front


def backproject_pixels(pose: CameraPose, intr: Intrinsics, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vectorized back-projection of (k, 2) pixels at (k,) positive depths"""
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if depths.size and not depths.min() > 0.0:
        raise GeometryError("back-projection depths must be positive")
    cam = np.stack([(pixels[:, 0] - intr.cx) / intr.fx * depths,
                    (pixels[:, 1] - intr.cy) / intr.fy * depths,
                    depths], axis=1)
    return (cam - pose.translation) @ pose.rotation


def pixel_rays(intr: Intrinsics) -> np.ndarray:
    """Camera-frame rays (H, W, 3) with unit z for every pixel center"""
    u, v = np.meshgrid(np.arange(intr.width, dtype=np.float64), np.arange(intr.height, dtype=np.float64))
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def face_normals(mesh: TriMesh, normalize: bool = True) -> np.ndarray:
    """Per-face normals; unnormalized normals have length 2 * area"""
    v = mesh.vertices
    f = mesh.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    if not normalize:
        return n
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0.0)


def vertex_normals(mesh: TriMesh, return_flags: bool = False):
    """
    Area-weighted vertex normals

    Args:
        mesh: Triangle mesh
        return_flags: Also return the boolean mask of vertices with a defined normal

    Returns:
        (n, 3) unit normals; vertices touching only zero-area faces (or none)
        get PLACEHOLDER_NORMAL and a False flag
    """
    if mesh.n_vertices == 0:
        raise GeometryError("cannot compute normals of an empty mesh")
    weighted = face_normals(mesh, normalize=False)
    acc = np.zeros((mesh.n_vertices, 3))
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], weighted)
    length = np.linalg.norm(acc, axis=1)
    ok = length > 1e-300
    normals = np.tile(PLACEHOLDER_NORMAL, (mesh.n_vertices, 1))
    normals[ok] = acc[ok] / length[ok, None]
    if (~ok).any():
        logger.debug("%d vertices without a defined normal", int((~ok).sum()))
    return (normals, ok) if return_flags else normals


def front_facing(mesh: TriMesh, pose: CameraPose) -> np.ndarray:
    """Faces whose outward normal points toward the camera center"""
    fn = face_normals(mesh, normalize=False)
    v0 = mesh.vertices[mesh.faces[:, 0]]
    return np.einsum('ij,ij->i', fn, pose.center - v0) > 0.0


def umeyama(source: np.ndarray, target: np.ndarray, with_scale: bool = True
            ) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """
    Closed-form least-squares similarity (or rigid) transform mapping source onto target

    Returns:
        (scale, rotation, translation, singular values of the source covariance)
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    spread = np.linalg.svd(xs.T @ xs / len(src), compute_uv=False)
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        S[2, 2] = -1.0
    R = u @ S @ vt
    var_s = (xs ** 2).sum() / len(src)
    scale = float(np.trace(np.diag(d) @ S) / var_s) if with_scale else 1.0
    t = mu_d - scale * R @ mu_s
    return scale, R, t, spread
