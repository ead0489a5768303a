"""
Depth Fusion Module
Prior-mesh filtering of depth maps and multi-view consistent fusion into a point cloud
"""
import logging
import math
from typing import List

import numba as nb
import numpy as np

from config.pipeline_config import FusionConfig
from src.errors import GeometryError
from src.geometry import pixel_rays
from src.models import DepthMap, Keyframe, PointCloud

logger = logging.getLogger(__name__)


def filter_with_prior(depth: DepthMap, prior: DepthMap, tau_rel: float = 0.05,
                      cost_threshold: float = 0.6) -> DepthMap:
    """
    Drop depth pixels that disagree with the coarse mesh

    Where the prior covers a pixel, the estimate survives iff
    |d - d_prior| <= tau_rel * d_prior. Elsewhere it survives only with a
    stored cost strictly below cost_threshold / 2.
    """
    if depth.shape != prior.shape:
        raise GeometryError(f"depth map {depth.shape} and prior {prior.shape} differ in size")
    valid = depth.valid.copy()
    covered = prior.valid
    band = np.zeros(depth.shape, dtype=bool)
    band[covered] = np.abs(depth.depth[covered] - prior.depth[covered]) <= tau_rel * prior.depth[covered]
    if depth.cost is not None:
        confident = depth.cost < 0.5 * cost_threshold
    else:
        confident = np.zeros(depth.shape, dtype=bool)
    valid &= np.where(covered, band, confident)
    out = np.where(valid, depth.depth, np.inf)
    logger.debug("Prior filter kept %d of %d pixels", int(valid.sum()), int(depth.valid.sum()))
    return DepthMap(depth=out, valid=valid, normal=depth.normal, cost=depth.cost)


@nb.njit(cache=True)
def _fuse(depth, valid, points, normals, has_normals, R, t, cams, colors, min_views, eps, cos_max):
    m, h, w = depth.shape
    used = np.zeros((m, h, w), dtype=np.bool_)
    cap = np.count_nonzero(valid)
    out_p = np.empty((cap, 3))
    out_n = np.empty((cap, 3))
    out_c = np.empty((cap, 3), dtype=np.uint8)
    out_s = np.empty(cap, dtype=np.int64)
    hit_k = np.empty(m, dtype=np.int64)
    hit_y = np.empty(m, dtype=np.int64)
    hit_x = np.empty(m, dtype=np.int64)
    count = 0
    for r in range(m):
        for y in range(h):
            for x in range(w):
                if not valid[r, y, x] or used[r, y, x]:
                    continue
                X0, X1, X2 = points[r, y, x, 0], points[r, y, x, 1], points[r, y, x, 2]
                n_hits = 0
                for j in range(m):
                    if j == r:
                        continue
                    zc = R[j, 2, 0] * X0 + R[j, 2, 1] * X1 + R[j, 2, 2] * X2 + t[j, 2]
                    if zc <= 0.0:
                        continue
                    xc = R[j, 0, 0] * X0 + R[j, 0, 1] * X1 + R[j, 0, 2] * X2 + t[j, 0]
                    yc = R[j, 1, 0] * X0 + R[j, 1, 1] * X1 + R[j, 1, 2] * X2 + t[j, 1]
                    u = np.rint(cams[j, 0] * xc / zc + cams[j, 2])
                    v = np.rint(cams[j, 1] * yc / zc + cams[j, 3])
                    if u < 0 or v < 0 or u >= w or v >= h:
                        continue
                    ui, vi = int(u), int(v)
                    if not valid[j, vi, ui] or used[j, vi, ui]:
                        continue
                    dj = depth[j, vi, ui]
                    if abs(zc - dj) > eps * dj:
                        continue
                    if has_normals[r] and has_normals[j]:
                        c = (normals[r, y, x, 0] * normals[j, vi, ui, 0] + normals[r, y, x, 1] * normals[j, vi, ui, 1]
                             + normals[r, y, x, 2] * normals[j, vi, ui, 2])
                        if c < cos_max:
                            continue
                    hit_k[n_hits] = j
                    hit_y[n_hits] = vi
                    hit_x[n_hits] = ui
                    n_hits += 1
                if n_hits + 1 < min_views:
                    continue
                sp0, sp1, sp2 = X0, X1, X2
                sn0, sn1, sn2 = normals[r, y, x, 0], normals[r, y, x, 1], normals[r, y, x, 2]
                used[r, y, x] = True
                for k in range(n_hits):
                    j, vi, ui = hit_k[k], hit_y[k], hit_x[k]
                    sp0 += points[j, vi, ui, 0]
                    sp1 += points[j, vi, ui, 1]
                    sp2 += points[j, vi, ui, 2]
                    sn0 += normals[j, vi, ui, 0]
                    sn1 += normals[j, vi, ui, 1]
                    sn2 += normals[j, vi, ui, 2]
                    used[j, vi, ui] = True
                total = n_hits + 1
                out_p[count, 0] = sp0 / total
                out_p[count, 1] = sp1 / total
                out_p[count, 2] = sp2 / total
                norm = np.sqrt(sn0 * sn0 + sn1 * sn1 + sn2 * sn2)
                if norm > 0.0:
                    out_n[count, 0] = sn0 / norm
                    out_n[count, 1] = sn1 / norm
                    out_n[count, 2] = sn2 / norm
                else:
                    out_n[count, 0] = normals[r, y, x, 0]
                    out_n[count, 1] = normals[r, y, x, 1]
                    out_n[count, 2] = normals[r, y, x, 2]
                out_c[count, 0] = colors[r, y, x, 0]
                out_c[count, 1] = colors[r, y, x, 1]
                out_c[count, 2] = colors[r, y, x, 2]
                out_s[count] = total
                count += 1
    return out_p[:count], out_n[:count], out_c[:count], out_s[:count]


def _rgb8(kf: Keyframe) -> np.ndarray:
    img = np.asarray(kf.image)
    if not np.issubdtype(img.dtype, np.integer):
        img = np.clip(np.rint(img * 255.0), 0, 255)
    img = img.astype(np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., :3]


def fuse_depth_maps(keyframes: List[Keyframe], depths: List[DepthMap], cfg: FusionConfig) -> PointCloud:
    """
    Fuse per-view depth maps into one point cloud

    References are visited in ascending keyframe id, so the result does not
    depend on the input order. A pixel supports at most one fused point.

    Args:
        keyframes: Keyframes, one per depth map
        depths: Filtered depth maps (normals in camera frame, optional)
        cfg: Fusion config

    Returns:
        PointCloud with support_count = 1 + number of consistent other views
    """
    if len(keyframes) != len(depths):
        raise GeometryError(f"{len(keyframes)} keyframes but {len(depths)} depth maps")
    if not keyframes:
        return PointCloud(points=np.zeros((0, 3)))
    order = sorted(range(len(keyframes)), key=lambda i: keyframes[i].id)
    h = max(depths[i].shape[0] for i in order)
    w = max(depths[i].shape[1] for i in order)
    m = len(order)

    depth = np.full((m, h, w), np.inf)
    valid = np.zeros((m, h, w), dtype=bool)
    points = np.zeros((m, h, w, 3))
    normals = np.zeros((m, h, w, 3))
    has_normals = np.zeros(m, dtype=bool)
    colors = np.zeros((m, h, w, 3), dtype=np.uint8)
    R = np.zeros((m, 3, 3))
    t = np.zeros((m, 3))
    cams = np.zeros((m, 4))
    for k, i in enumerate(order):
        kf, dm = keyframes[i], depths[i]
        if dm.shape != (kf.intrinsics.height, kf.intrinsics.width):
            raise GeometryError(f"keyframe {kf.id}: depth map {dm.shape} does not match the image size")
        dh, dw = dm.shape
        depth[k, :dh, :dw] = dm.depth
        valid[k, :dh, :dw] = dm.valid
        cam = pixel_rays(kf.intrinsics) * np.where(dm.valid, dm.depth, 0.0)[..., None]
        points[k, :dh, :dw] = (cam - kf.pose.translation) @ kf.pose.rotation
        if dm.normal is not None:
            has_normals[k] = True
            normals[k, :dh, :dw] = dm.normal @ kf.pose.rotation
        colors[k, :dh, :dw] = _rgb8(kf)
        R[k] = kf.pose.rotation
        t[k] = kf.pose.translation
        cams[k] = (kf.intrinsics.fx, kf.intrinsics.fy, kf.intrinsics.cx, kf.intrinsics.cy)

    cos_max = math.cos(math.radians(cfg.normal_agreement_deg))
    p, n, c, s = _fuse(depth, valid, points, normals, has_normals, R, t, cams, colors,
                       cfg.min_consistent_views, cfg.rel_depth_eps, cos_max)
    logger.info("Fused %d points from %d depth maps", len(p), m)
    return PointCloud(points=p, normals=n if has_normals.all() else None, colors=c, support_count=s)
