"""
Synthetic Scene Generator
Renders a posed image sequence, depth maps and landmark tracks around a known mesh
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from config.pipeline_config import (
    EdgeConfig,
    FitConfig,
    PatchMatchConfig,
    ProjectManifest,
    StageConfigs,
    SynthConfig,
    ViewSelConfig,
)
from src.errors import GeometryError
from src.geometry import face_normals, pixel_rays, vertex_normals
from src.io_formats import (
    camera_record,
    save_cameras,
    save_correspondence,
    save_depth_map,
    save_image,
    save_landmarks,
    save_manifest,
    save_mesh,
)
from src.models import (
    CameraPose,
    CorrespondenceTable,
    DepthMap,
    Intrinsics,
    JAW_CONTOUR_IDS,
    Keyframe,
    LandmarkObservation,
    TriMesh,
)
from src.primitives import bounding_ellipsoid, ear_outer_contour_ids, landmark_vertices
from src.rasterizer import rasterize, visible_mask
from utils.helpers import ensure_directory

logger = logging.getLogger(__name__)

LIGHT_DIRECTION = np.array([0.35, 0.55, 0.75]) / np.linalg.norm([0.35, 0.55, 0.75])
# mouth landmark dropped together with the jaw contour
EXTRA_EXCLUDED_ID = 60
# known similarity placing the template away from the scene frame
TEMPLATE_SCALE = 0.85
TEMPLATE_YAW_DEG = 12.0
TEMPLATE_OFFSET = np.array([0.4, -0.25, 0.3])


def arc_cameras(mesh: TriMesh, cfg: SynthConfig) -> Tuple[List[CameraPose], Intrinsics]:
    """Cameras on a horizontal arc around the mesh centroid, from one profile to the other"""
    center = mesh.centroid
    distance = 1.25 * mesh.bbox_diagonal
    f = float(cfg.width)
    intr = Intrinsics(fx=f, fy=f, cx=(cfg.width - 1) / 2.0, cy=(cfg.height - 1) / 2.0,
                      width=cfg.width, height=cfg.height)
    half = np.radians(cfg.arc_degrees) / 2.0
    poses = []
    for k in range(cfg.n_views):
        az = -half + 2.0 * half * k / (cfg.n_views - 1)
        eye = center + distance * np.array([np.sin(az), 0.0, np.cos(az)])
        poses.append(CameraPose.look_at(eye, center))
    return poses, intr


def surface_texture(points: np.ndarray, seed: int, scale: float) -> np.ndarray:
    """Procedural albedo in [0.2, 1] from a fixed sum of 3D sinusoids"""
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(6, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    wavelengths = scale * rng.uniform(0.025, 0.07, size=6)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=6)
    s = np.sin(2.0 * np.pi * (points @ directions.T) / wavelengths + phases).mean(axis=1)
    return 0.6 + 0.4 * s


def render_view(mesh: TriMesh, pose: CameraPose, intr: Intrinsics, seed: int) -> Tuple[np.ndarray, DepthMap]:
    """Shaded 8-bit grayscale image and exact depth map of one view"""
    depth, face_id = rasterize(mesh, pose, intr)
    covered = face_id >= 0
    normals = face_normals(mesh)
    image = np.zeros(depth.shape)
    cam = pixel_rays(intr)[covered] * depth[covered][:, None]
    world = (cam - pose.translation) @ pose.rotation
    shade = 0.25 + 0.75 * np.clip(normals[face_id[covered]] @ LIGHT_DIRECTION, 0.0, 1.0)
    image[covered] = shade * surface_texture(world, seed, mesh.bbox_diagonal)
    cam_normals = np.zeros(depth.shape + (3,))
    cam_normals[..., 2] = -1.0
    cam_normals[covered] = normals[face_id[covered]] @ pose.rotation.T
    valid = covered & (np.linalg.norm(cam_normals, axis=2) > 0.5)
    dm = DepthMap(depth=np.where(valid, depth, np.inf), valid=valid, normal=cam_normals)
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8), dm


def _template_pose() -> Tuple[float, np.ndarray, np.ndarray]:
    a = np.radians(TEMPLATE_YAW_DEG)
    R = np.array([[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]])
    return TEMPLATE_SCALE, R, TEMPLATE_OFFSET


def synth_manifest_configs(cfg: SynthConfig) -> StageConfigs:
    """Stage configs sized for the synthetic resolution"""
    return StageConfigs(
        view_selection=ViewSelConfig(num_sources=6),
        patchmatch=PatchMatchConfig(iterations=4, window=11, window_step=2, cost_top_k=3,
                                    refinement_steps=3, rng_seed=cfg.seed),
        edges=EdgeConfig(),
        fit=FitConfig(inner_max_iters=5),
    )


def synth_scene(gt_mesh: TriMesh, out_dir: Union[str, Path], cfg: SynthConfig,
                template: Optional[TriMesh] = None, landmarks: Optional[Dict[int, int]] = None) -> Path:
    """
    Write a complete synthetic project around a ground-truth mesh

    The project holds cameras on an arc facing the mesh centroid, shaded
    textured images, noisy depth maps, projected landmark tracks, a template
    placed by a known similarity transform, its correspondence table, the
    ground-truth mesh and a manifest. Output is deterministic per seed.

    Args:
        gt_mesh: Ground-truth surface (face looking along +z, up +y)
        out_dir: Project directory
        cfg: View count, arc, resolution, noise levels and seed
        template: Template with gt_mesh's topology; defaults to its bounding ellipsoid
        landmarks: landmark id -> vertex; defaults to the built-in facial layout

    Returns:
        Path of the written manifest

    Raises:
        GeometryError: if the mesh is not entirely in front of a camera
    """
    if gt_mesh.is_empty:
        raise GeometryError("synthetic scene needs a non-empty mesh")
    out = ensure_directory(out_dir)
    ensure_directory(out / "images")
    ensure_directory(out / "synth_depth")
    rng = np.random.default_rng(cfg.seed)
    poses, intr = arc_cameras(gt_mesh, cfg)
    landmarks = landmarks if landmarks is not None else landmark_vertices(gt_mesh)
    lm_ids = sorted(landmarks)
    lm_points = gt_mesh.vertices[[landmarks[i] for i in lm_ids]]
    diagonal = gt_mesh.bbox_diagonal
    lm_normals = vertex_normals(gt_mesh)[[landmarks[i] for i in lm_ids]]

    records = []
    observations: List[LandmarkObservation] = []
    for k, pose in enumerate(tqdm(poses, desc="Rendering", disable=logger.getEffectiveLevel() > logging.INFO)):
        z = pose.to_camera(gt_mesh.vertices)[:, 2]
        if z.min() <= 0.0:
            raise GeometryError(f"view {k}: mesh is not entirely in front of the camera")
        image, depth = render_view(gt_mesh, pose, intr, cfg.seed)
        name = f"images/frame_{k:04d}.png"
        save_image(out / name, image)
        records.append(camera_record(Keyframe(id=k, image=image, pose=pose, intrinsics=intr), name))

        noise = rng.normal(0.0, cfg.depth_sigma_frac * diagonal, size=depth.shape)
        noisy = np.where(depth.valid, depth.depth + noise, np.inf)
        save_depth_map(out / "synth_depth" / f"depth_{k:04d}.pfm",
                       DepthMap.from_depth(noisy, normal=depth.normal))

        zbuffer = np.where(depth.valid, depth.depth, np.inf)
        seen = visible_mask(lm_points, pose, intr, zbuffer, 0.01, allow_uncovered=True)
        cam = pose.to_camera(lm_points)
        pix = np.stack([intr.fx * cam[:, 0] / cam[:, 2] + intr.cx, intr.fy * cam[:, 1] / cam[:, 2] + intr.cy], axis=1)
        pix_noise = rng.normal(0.0, cfg.landmark_sigma_px, size=pix.shape)
        view_dir = pose.center - lm_points
        view_dir /= np.linalg.norm(view_dir, axis=1, keepdims=True)
        facing = np.einsum('ij,ij->i', lm_normals, view_dir)
        for j in np.flatnonzero(seen):
            # grazing views get the tracker's low-confidence score
            confidence = 1.0 if facing[j] > 0.2 else 0.5
            observations.append(LandmarkObservation(frame_id=k, landmark_id=lm_ids[j],
                                                    position=tuple(float(v) for v in pix[j] + pix_noise[j]),
                                                    confidence=confidence))

    save_cameras(out / "cameras.json", records)
    save_landmarks(out / "landmarks.json", observations)

    template = template if template is not None else bounding_ellipsoid(gt_mesh)
    s, R, t = _template_pose()
    save_mesh(out / "template.ply", template.with_vertices(s * template.vertices @ R.T + t))
    save_mesh(out / "gt_mesh.ply", gt_mesh)
    table = CorrespondenceTable(entries=dict(landmarks),
                                excluded_landmark_ids=list(JAW_CONTOUR_IDS) + [EXTRA_EXCLUDED_ID],
                                ear_contour_ids=[i for i in ear_outer_contour_ids() if i in landmarks])
    save_correspondence(out / "correspondence.json", table)

    manifest = ProjectManifest(cameras="cameras.json", landmarks="landmarks.json",
                               correspondence="correspondence.json", template="template.ply",
                               gt_mesh="gt_mesh.ply", output_dir="output", configs=synth_manifest_configs(cfg))
    path = save_manifest(out / "manifest.json", manifest)
    logger.info("Synthetic project with %d views and %d landmark observations at %s",
                len(poses), len(observations), out)
    return path
