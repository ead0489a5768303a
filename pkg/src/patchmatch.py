"""
PatchMatch Depth Estimation Module
Multi-view slanted-plane PatchMatch with prior-mesh initialization
"""
import logging
from typing import List, Optional

import numba as nb
import numpy as np

from config.pipeline_config import PatchMatchConfig
from src.errors import GeometryError
from src.geometry import warn_if_distorted
from src.models import DepthMap, Keyframe

logger = logging.getLogger(__name__)

MAX_COST = 2.0
DEGENERATE_VARIANCE = 1e-8

# candidate offsets for checkerboard propagation; all have odd Manhattan length,
# so a pixel only reads hypotheses of the opposite color
_NEIGHBORS = np.array([[0, -1], [0, 1], [-1, 0], [1, 0], [0, -3], [0, 3], [-3, 0], [3, 0]], dtype=np.int64)


# ═══════════════════════════════════════════════════════════
# COUNTER-BASED RNG (independent of thread scheduling)
# ═══════════════════════════════════════════════════════════

@nb.njit(cache=True)
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def _uniform(seed, pixel, counter):
    """Uniform [0, 1) draw keyed by (seed, pixel, counter)"""
    golden = np.uint64(0x9E3779B97F4A7C15)
    z = _mix64(np.uint64(seed) * golden + np.uint64(pixel))
    z = _mix64(z + (np.uint64(counter) + np.uint64(1)) * golden)
    return float(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# ═══════════════════════════════════════════════════════════
# MATCHING COST
# ═══════════════════════════════════════════════════════════

@nb.njit(cache=True)
def _bilinear(img, h, w, u, v):
    x0 = int(np.floor(u))
    y0 = int(np.floor(v))
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    ax = u - x0
    ay = v - y0
    return ((1.0 - ax) * (1.0 - ay) * img[y0, x0] + ax * (1.0 - ay) * img[y0, x1]
            + (1.0 - ax) * ay * img[y1, x0] + ax * ay * img[y1, x1])


@nb.njit(cache=True)
def _ref_degenerate(ref, y, x, half, step):
    h, w = ref.shape
    n = 0
    s = 0.0
    ss = 0.0
    for dy in range(-half, half + 1, step):
        qy = y + dy
        if qy < 0 or qy >= h:
            continue
        for dx in range(-half, half + 1, step):
            qx = x + dx
            if qx < 0 or qx >= w:
                continue
            val = ref[qy, qx]
            n += 1
            s += val
            ss += val * val
    if n < 2:
        return True
    mean = s / n
    return ss / n - mean * mean < DEGENERATE_VARIANCE


@nb.njit(cache=True)
def _plane_cost(y, x, depth, nx, ny, nz, ref, ref_cam, src_imgs, src_dims, src_cam, src_R, src_t,
                half, step, top_k):
    """Mean of the top_k lowest (1 - NCC) costs over source views for one plane hypothesis"""
    h, w = ref.shape
    fx, fy, cx, cy = ref_cam[0], ref_cam[1], ref_cam[2], ref_cam[3]
    n_src = src_imgs.shape[0]
    # plane through the back-projected center pixel
    rx0 = (x - cx) / fx
    ry0 = (y - cy) / fy
    plane_d = nx * rx0 * depth + ny * ry0 * depth + nz * depth

    sum_s = np.zeros(n_src)
    sum_ss = np.zeros(n_src)
    sum_rs = np.zeros(n_src)
    ok = np.ones(n_src, dtype=np.bool_)
    count = 0
    sum_r = 0.0
    sum_rr = 0.0
    for dy in range(-half, half + 1, step):
        qy = y + dy
        if qy < 0 or qy >= h:
            continue
        for dx in range(-half, half + 1, step):
            qx = x + dx
            if qx < 0 or qx >= w:
                continue
            rx = (qx - cx) / fx
            ry = (qy - cy) / fy
            denom = nx * rx + ny * ry + nz
            if denom >= -1e-12:
                return MAX_COST
            lam = plane_d / denom
            if lam <= 0.0:
                return MAX_COST
            X0, X1, X2 = rx * lam, ry * lam, lam
            val = ref[qy, qx]
            count += 1
            sum_r += val
            sum_rr += val * val
            for s in range(n_src):
                if not ok[s]:
                    continue
                zs = src_R[s, 2, 0] * X0 + src_R[s, 2, 1] * X1 + src_R[s, 2, 2] * X2 + src_t[s, 2]
                if zs <= 0.0:
                    ok[s] = False
                    continue
                xs = src_R[s, 0, 0] * X0 + src_R[s, 0, 1] * X1 + src_R[s, 0, 2] * X2 + src_t[s, 0]
                ys = src_R[s, 1, 0] * X0 + src_R[s, 1, 1] * X1 + src_R[s, 1, 2] * X2 + src_t[s, 1]
                u = src_cam[s, 0] * xs / zs + src_cam[s, 2]
                v = src_cam[s, 1] * ys / zs + src_cam[s, 3]
                sh, sw = src_dims[s, 0], src_dims[s, 1]
                if u < 0.0 or v < 0.0 or u > sw - 1 or v > sh - 1:
                    ok[s] = False
                    continue
                sv = _bilinear(src_imgs[s], sh, sw, u, v)
                sum_s[s] += sv
                sum_ss[s] += sv * sv
                sum_rs[s] += val * sv
    if count < 2:
        return MAX_COST
    mean_r = sum_r / count
    var_r = sum_rr / count - mean_r * mean_r
    if var_r < DEGENERATE_VARIANCE:
        return MAX_COST
    costs = np.full(n_src, MAX_COST)
    for s in range(n_src):
        if not ok[s]:
            continue
        mean_s = sum_s[s] / count
        var_s = sum_ss[s] / count - mean_s * mean_s
        if var_s < DEGENERATE_VARIANCE:
            continue
        ncc = (sum_rs[s] / count - mean_r * mean_s) / np.sqrt(var_r * var_s)
        costs[s] = min(max(1.0 - ncc, 0.0), MAX_COST)
    costs.sort()
    total = 0.0
    for k in range(top_k):
        total += costs[k]
    return total / top_k


# ═══════════════════════════════════════════════════════════
# OPTIMIZATION PASSES
# ═══════════════════════════════════════════════════════════

@nb.njit(cache=True)
def _random_normal(seed, pixel, counter, rx, ry):
    # uniform direction, flipped to face the camera
    z = 2.0 * _uniform(seed, pixel, counter) - 1.0
    phi = 2.0 * np.pi * _uniform(seed, pixel, counter + 1)
    r = np.sqrt(max(0.0, 1.0 - z * z))
    nx, ny, nz = r * np.cos(phi), r * np.sin(phi), z
    if nx * rx + ny * ry + nz > 0.0:
        nx, ny, nz = -nx, -ny, -nz
    return nx, ny, nz


@nb.njit(parallel=True, cache=True)
def _initialize(depth, normal, cost, lo, hi, prior_normal, use_prior_normal, active,
                ref, ref_cam, src_imgs, src_dims, src_cam, src_R, src_t, half, step, top_k, seed):
    h, w = ref.shape
    fx, fy, cx, cy = ref_cam[0], ref_cam[1], ref_cam[2], ref_cam[3]
    for y in nb.prange(h):
        for x in range(w):
            if not active[y, x]:
                continue
            pix = y * w + x
            rx = (x - cx) / fx
            ry = (y - cy) / fy
            d = lo[y, x] + (hi[y, x] - lo[y, x]) * _uniform(seed, pix, 0)
            if use_prior_normal[y, x]:
                nx, ny, nz = prior_normal[y, x, 0], prior_normal[y, x, 1], prior_normal[y, x, 2]
            else:
                nx, ny, nz = _random_normal(seed, pix, 1, rx, ry)
            depth[y, x] = d
            normal[y, x, 0] = nx
            normal[y, x, 1] = ny
            normal[y, x, 2] = nz
            cost[y, x] = _plane_cost(y, x, d, nx, ny, nz, ref, ref_cam, src_imgs, src_dims, src_cam,
                                     src_R, src_t, half, step, top_k)


@nb.njit(parallel=True, cache=True)
def _sweep(color, iteration, depth, normal, cost, lo, hi, active, neighbors, refine_steps, perturbation,
           ref, ref_cam, src_imgs, src_dims, src_cam, src_R, src_t, half, step, top_k, seed):
    """One checkerboard phase: propagation from opposite-color neighbors, then random refinement"""
    h, w = ref.shape
    fx, fy, cx, cy = ref_cam[0], ref_cam[1], ref_cam[2], ref_cam[3]
    for y in nb.prange(h):
        for x in range((y + color) % 2, w, 2):
            if not active[y, x]:
                continue
            pix = y * w + x
            rx = (x - cx) / fx
            ry = (y - cy) / fy
            best = cost[y, x]
            bd = depth[y, x]
            bnx, bny, bnz = normal[y, x, 0], normal[y, x, 1], normal[y, x, 2]
            for k in range(neighbors.shape[0]):
                qy = y + neighbors[k, 0]
                qx = x + neighbors[k, 1]
                if qy < 0 or qy >= h or qx < 0 or qx >= w or not active[qy, qx]:
                    continue
                nx, ny, nz = normal[qy, qx, 0], normal[qy, qx, 1], normal[qy, qx, 2]
                qd = depth[qy, qx]
                plane_d = (nx * (qx - cx) / fx + ny * (qy - cy) / fy + nz) * qd
                denom = nx * rx + ny * ry + nz
                if denom >= -1e-12:
                    continue
                d = plane_d / denom
                if d < lo[y, x] or d > hi[y, x]:
                    continue
                c = _plane_cost(y, x, d, nx, ny, nz, ref, ref_cam, src_imgs, src_dims, src_cam,
                                src_R, src_t, half, step, top_k)
                if c < best:
                    best, bd, bnx, bny, bnz = c, d, nx, ny, nz
            half_range = 0.5 * (hi[y, x] - lo[y, x])
            scale = 1.0
            for k in range(refine_steps):
                counter = 16 + (iteration * 4 + k) * 8
                d = bd + (2.0 * _uniform(seed, pix, counter) - 1.0) * half_range * scale
                d = min(max(d, lo[y, x]), hi[y, x])
                nx = bnx + (2.0 * _uniform(seed, pix, counter + 1) - 1.0) * perturbation * scale
                ny = bny + (2.0 * _uniform(seed, pix, counter + 2) - 1.0) * perturbation * scale
                nz = bnz + (2.0 * _uniform(seed, pix, counter + 3) - 1.0) * perturbation * scale
                norm = np.sqrt(nx * nx + ny * ny + nz * nz)
                scale *= 0.5
                if norm < 1e-12:
                    continue
                nx, ny, nz = nx / norm, ny / norm, nz / norm
                if nx * rx + ny * ry + nz >= 0.0:
                    continue
                c = _plane_cost(y, x, d, nx, ny, nz, ref, ref_cam, src_imgs, src_dims, src_cam,
                                src_R, src_t, half, step, top_k)
                if c < best:
                    best, bd, bnx, bny, bnz = c, d, nx, ny, nz
            cost[y, x] = best
            depth[y, x] = bd
            normal[y, x, 0] = bnx
            normal[y, x, 1] = bny
            normal[y, x, 2] = bnz


@nb.njit(parallel=True, cache=True)
def _degenerate_mask(ref, half, step):
    h, w = ref.shape
    out = np.zeros((h, w), dtype=np.bool_)
    for y in nb.prange(h):
        for x in range(w):
            out[y, x] = _ref_degenerate(ref, y, x, half, step)
    return out


# ═══════════════════════════════════════════════════════════
# PUBLIC API
# ═══════════════════════════════════════════════════════════

def _depth_bounds(ref: Keyframe, prior: DepthMap, cfg: PatchMatchConfig, scene_bbox: Optional[np.ndarray]):
    """Per-pixel search interval [lo, hi]"""
    h, w = prior.shape
    corners = None
    if scene_bbox is not None:
        lo_c, hi_c = np.asarray(scene_bbox, dtype=np.float64)
        corners = np.array([[x, y, z] for x in (lo_c[0], hi_c[0]) for y in (lo_c[1], hi_c[1])
                            for z in (lo_c[2], hi_c[2])])
        diagonal = float(np.linalg.norm(hi_c - lo_c))
    elif prior.valid.any():
        ys, xs = np.nonzero(prior.valid)
        d = prior.depth[ys, xs]
        intr = ref.intrinsics
        pts = np.stack([(xs - intr.cx) / intr.fx * d, (ys - intr.cy) / intr.fy * d, d], axis=1)
        diagonal = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    else:
        raise GeometryError(f"keyframe {ref.id}: empty prior and no scene bounding box to bound the search")

    if prior.valid.any():
        g_lo, g_hi = float(prior.depth[prior.valid].min()), float(prior.depth[prior.valid].max())
    else:
        logger.warning("Keyframe %d: prior depth map is empty; searching the scene bounding-box range", ref.id)
        z = ref.pose.to_camera(corners)[:, 2]
        g_lo, g_hi = max(float(z.min()), 1e-6), float(z.max())
        if g_hi <= g_lo:
            raise GeometryError(f"keyframe {ref.id}: scene bounding box is behind the camera")

    radius = cfg.depth_range_frac * diagonal
    lo = np.full((h, w), g_lo)
    hi = np.full((h, w), g_hi)
    pd = prior.depth[prior.valid]
    lo[prior.valid] = np.maximum(pd - radius, pd * 1e-3)
    hi[prior.valid] = pd + radius
    return lo, hi


def patchmatch_depth(ref: Keyframe, sources: List[Keyframe], prior: DepthMap, cfg: PatchMatchConfig,
                     scene_bbox: Optional[np.ndarray] = None) -> DepthMap:
    """
    Estimate a depth/normal map for `ref` by multi-view PatchMatch

    Args:
        ref: Reference keyframe
        sources: Source keyframes (at least one)
        prior: Depth rendered from the coarse mesh at the reference viewpoint
        cfg: PatchMatch config
        scene_bbox: (2, 3) scene bounds; used for the global range when the prior is empty

    Returns:
        DepthMap with camera-frame normals and aggregated costs; pixels above
        cost_threshold or with a textureless window are invalid
    """
    if not sources:
        raise GeometryError(f"keyframe {ref.id}: PatchMatch needs at least one source view")
    if prior.shape != (ref.intrinsics.height, ref.intrinsics.width):
        raise GeometryError(f"keyframe {ref.id}: prior is {prior.shape}, image is "
                            f"{(ref.intrinsics.height, ref.intrinsics.width)}")
    top_k = cfg.cost_top_k
    if top_k > len(sources):
        logger.warning("cost_top_k=%d exceeds %d sources; aggregating all sources", top_k, len(sources))
        top_k = len(sources)
    for kf in [ref] + list(sources):
        warn_if_distorted(kf.intrinsics, kf.id)

    half = cfg.window // 2
    step = cfg.window_step
    refimg = np.ascontiguousarray(ref.gray)
    h, w = refimg.shape
    lo, hi = _depth_bounds(ref, prior, cfg, scene_bbox)

    n_src = len(sources)
    max_h = max(kf.intrinsics.height for kf in sources)
    max_w = max(kf.intrinsics.width for kf in sources)
    src_imgs = np.zeros((n_src, max_h, max_w))
    src_dims = np.zeros((n_src, 2), dtype=np.int64)
    src_cam = np.zeros((n_src, 4))
    src_R = np.zeros((n_src, 3, 3))
    src_t = np.zeros((n_src, 3))
    R0, t0 = ref.pose.rotation, ref.pose.translation
    for s, kf in enumerate(sources):
        g = kf.gray
        src_imgs[s, :g.shape[0], :g.shape[1]] = g
        src_dims[s] = g.shape
        i = kf.intrinsics
        src_cam[s] = (i.fx, i.fy, i.cx, i.cy)
        # reference camera frame -> source camera frame
        src_R[s] = kf.pose.rotation @ R0.T
        src_t[s] = kf.pose.translation - src_R[s] @ t0
    intr = ref.intrinsics
    ref_cam = np.array([intr.fx, intr.fy, intr.cx, intr.cy])
    seed = abs(int(cfg.rng_seed))

    degenerate = _degenerate_mask(refimg, half, step)
    active = ~degenerate
    depth = np.full((h, w), np.inf)
    normal = np.zeros((h, w, 3))
    normal[..., 2] = -1.0
    cost = np.full((h, w), MAX_COST)
    prior_normal = prior.normal if prior.normal is not None else np.zeros((h, w, 3))
    use_prior_normal = prior.valid & (prior.normal is not None)

    _initialize(depth, normal, cost, lo, hi, np.ascontiguousarray(prior_normal), use_prior_normal, active,
                refimg, ref_cam, src_imgs, src_dims, src_cam, src_R, src_t, half, step, top_k, seed)
    for it in range(cfg.iterations):
        for color in (0, 1):
            _sweep(color, it, depth, normal, cost, lo, hi, active, _NEIGHBORS, cfg.refinement_steps,
                   cfg.normal_perturbation, refimg, ref_cam, src_imgs, src_dims, src_cam, src_R, src_t,
                   half, step, top_k, seed)
        logger.debug("Keyframe %d iteration %d: mean active cost %.4f", ref.id, it,
                     float(cost[active].mean()) if active.any() else float('nan'))

    valid = active & (cost <= cfg.cost_threshold) & np.isfinite(depth) & (depth > 0.0)
    depth[~valid] = np.inf
    norms = np.linalg.norm(normal, axis=2, keepdims=True)
    normal = np.where(norms > 0.0, normal / np.where(norms > 0.0, norms, 1.0), normal)
    logger.info("Keyframe %d: %.1f%% valid depth pixels", ref.id, 100.0 * valid.mean())
    return DepthMap(depth=depth, valid=valid, normal=normal, cost=cost)
