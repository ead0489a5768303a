"""
Pipeline Stages
Each stage reads its inputs from the project, writes artifacts atomically and returns a report
"""
import logging
import time
from functools import cached_property
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

from pydantic import ValidationError
from tqdm import tqdm

from config.pipeline_config import StageConfigs, runtime_settings
from src.edges import detect_edges
from src.errors import ConfigurationError, MissingArtifactError
from src.evaluation import accuracy, completion, error_heatmap
from src.fitting import colorize_mesh, fit_mesh
from src.fusion import filter_with_prior, fuse_depth_maps
from src.io_formats import (
    DOCUMENT_SCHEMA_VERSION,
    load_correspondence,
    load_depth_map,
    load_edge_map,
    load_json,
    load_keyframes,
    load_landmarks,
    load_landmarks3d,
    load_manifest,
    load_mesh,
    load_point_cloud,
    save_depth_map,
    save_edge_map,
    save_energy_log,
    save_json,
    save_landmarks3d,
    save_mesh,
    save_point_cloud,
)
from src.landmarks import rigid_align, similarity_align, triangulate_all
from src.models import EAR_ID_BASE, EdgeMap, Keyframe
from src.patchmatch import patchmatch_depth
from src.rasterizer import render_depth
from src.view_selection import select_source_views
from utils.helpers import ensure_directory, file_sha256

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class Project:
    """A loaded manifest, its effective stage configs and the output directory"""

    def __init__(self, manifest_path: PathLike, overrides: Optional[Dict[str, dict]] = None,
                 output_dir: Optional[PathLike] = None):
        self.manifest_path = Path(manifest_path)
        self.manifest, self.root = load_manifest(self.manifest_path)
        self.configs = apply_overrides(self.manifest.configs, overrides or {})
        out = output_dir or runtime_settings.output_dir
        self.output_dir = ensure_directory(Path(out) if out else self.root / self.manifest.output_dir)

    def path(self, field: str) -> Optional[Path]:
        return self.manifest.resolve(self.root, getattr(self.manifest, field))

    def artifact(self, relative: str, stage: str) -> Path:
        """Path of an upstream artifact, which must exist"""
        p = self.output_dir / relative
        if not p.exists():
            raise MissingArtifactError(relative, stage)
        return p

    @cached_property
    def keyframes(self) -> List[Keyframe]:
        return load_keyframes(self.path('cameras'))

    @cached_property
    def table(self):
        return load_correspondence(self.path('correspondence'))


def apply_overrides(configs: StageConfigs, overrides: Dict[str, dict]) -> StageConfigs:
    """Merge per-section overrides and re-validate every touched section"""
    update = {}
    for section, values in overrides.items():
        if not values:
            continue
        if section not in StageConfigs.model_fields:
            raise ConfigurationError(f"unknown config section {section!r}")
        current = getattr(configs, section)
        try:
            update[section] = type(current).model_validate({**current.model_dump(), **values})
        except ValidationError as e:
            first = e.errors()[0]
            raise ConfigurationError(f"{section}.{'.'.join(map(str, first['loc']))}: {first['msg']}") from e
    return configs.model_copy(update=update)


def _report(project: Project, stage: str, config, inputs: Dict[str, Path], outputs: List[Path],
            counts: dict, started: float, **extra) -> dict:
    report = {
        "schema_version": DOCUMENT_SCHEMA_VERSION,
        "stage": stage,
        "config": config,
        "inputs": {name: file_sha256(p) for name, p in sorted(inputs.items())},
        "outputs": [str(p.relative_to(project.output_dir)) for p in outputs],
        "counts": counts,
        "timings": {"seconds": round(time.perf_counter() - started, 3)},
        **extra,
    }
    save_json(project.output_dir / "reports" / f"{stage}.json", report)
    return report


def _frame_name(prefix: str, kf: Keyframe, suffix: str) -> str:
    return f"{prefix}_{kf.id:04d}{suffix}"


def _quiet() -> bool:
    return logger.getEffectiveLevel() > logging.INFO


# ═══════════════════════════════════════════════════════════
# STAGES
# ═══════════════════════════════════════════════════════════

def run_triangulate(project: Project) -> dict:
    started = time.perf_counter()
    cfg = project.configs.landmarks
    observations = load_landmarks(project.path('landmarks'))
    lms = triangulate_all(observations, project.keyframes, cfg, project.table,
                          use_ear_landmarks=project.configs.fit.use_ear_landmarks)
    out = save_landmarks3d(project.output_dir / "landmarks3d.json", lms)
    low = sum(1 for o in observations if o.confidence < cfg.min_confidence)
    rms = [lm.rms_reprojection_error for lm in lms]
    return _report(project, "triangulate", cfg.model_dump(),
                   {"landmarks": project.path('landmarks'), "cameras": project.path('cameras'),
                    "correspondence": project.path('correspondence')},
                   [out], {"observations": len(observations), "low_confidence_observations": low,
                           "landmarks": len(lms), "ear_landmarks": sum(1 for lm in lms if lm.landmark_id >= EAR_ID_BASE)},
                   started, max_rms_px=max(rms) if rms else 0.0)


def run_align(project: Project) -> dict:
    started = time.perf_counter()
    lm_path = project.artifact("landmarks3d.json", "triangulate")
    template = load_mesh(project.path('template'))
    aligned, scale, R, t = similarity_align(template, project.table, load_landmarks3d(lm_path))
    out = save_mesh(project.output_dir / "prior_mesh.ply", aligned)
    transform = save_json(project.output_dir / "alignment.json",
                          {"schema_version": DOCUMENT_SCHEMA_VERSION, "scale": scale,
                           "rotation": R.ravel().tolist(), "translation": t.tolist()})
    return _report(project, "align", {}, {"template": project.path('template'), "landmarks3d": lm_path},
                   [out, transform], {"vertices": aligned.n_vertices}, started, scale=scale)


def run_select_views(project: Project) -> dict:
    started = time.perf_counter()
    prior_path = project.artifact("prior_mesh.ply", "align")
    cfg = project.configs.view_selection
    selection = select_source_views(project.keyframes, load_mesh(prior_path), cfg)
    out = save_json(project.output_dir / "views.json",
                    {"schema_version": DOCUMENT_SCHEMA_VERSION,
                     "sources": {str(k): v for k, v in sorted(selection.items())}})
    return _report(project, "select-views", cfg.model_dump(), {"prior_mesh": prior_path, "cameras": project.path('cameras')},
                   [out], {"references": len(selection)}, started)


def _load_selection(project: Project) -> Dict[int, List[int]]:
    doc = load_json(project.artifact("views.json", "select-views"))
    return {int(k): list(v) for k, v in doc["sources"].items()}


def run_mvs(project: Project) -> dict:
    started = time.perf_counter()
    prior_path = project.artifact("prior_mesh.ply", "align")
    prior_mesh = load_mesh(prior_path)
    selection = _load_selection(project)
    cfg = project.configs.patchmatch
    frames = {kf.id: kf for kf in project.keyframes}
    depth_dir = ensure_directory(project.output_dir / "depth")
    outputs, valid_raw, valid_kept = [], 0, 0
    for kf in tqdm(project.keyframes, desc="PatchMatch", disable=_quiet()):
        sources = [frames[i] for i in selection.get(kf.id, []) if i in frames]
        prior = render_depth(prior_mesh, kf.pose, kf.intrinsics)
        raw = patchmatch_depth(kf, sources, prior, cfg, scene_bbox=prior_mesh.bbox)
        kept = filter_with_prior(raw, prior, cfg.prior_filter_tau, cfg.cost_threshold)
        valid_raw += int(raw.valid.sum())
        valid_kept += int(kept.valid.sum())
        outputs += save_depth_map(depth_dir / _frame_name("depth", kf, ".pfm"), kept)
    return _report(project, "mvs", cfg.model_dump(), {"prior_mesh": prior_path, "cameras": project.path('cameras')},
                   outputs, {"depth_maps": len(project.keyframes), "valid_pixels": valid_raw,
                             "valid_after_prior_filter": valid_kept}, started)


def run_fuse(project: Project) -> dict:
    started = time.perf_counter()
    cfg = project.configs.fusion
    names = [f"depth/{_frame_name('depth', kf, '.pfm')}" for kf in project.keyframes]
    depth_paths = {name: project.artifact(name, "mvs") for name in names}
    depths = [load_depth_map(p) for p in depth_paths.values()]
    inputs = {"cameras": project.path('cameras'), **depth_paths}
    for name, path in depth_paths.items():
        for companion in (".normal.pfm", ".cost.pfm"):
            extra = path.with_suffix(companion)
            if extra.exists():
                inputs[name[:-len(".pfm")] + companion] = extra
    cloud = fuse_depth_maps(project.keyframes, depths, cfg)
    out = save_point_cloud(project.output_dir / "fused.ply", cloud)
    support = cloud.support_count
    return _report(project, "fuse", cfg.model_dump(), inputs, [out],
                   {"points": len(cloud),
                    "mean_support": float(support.mean()) if support is not None and len(support) else 0.0},
                   started)


def run_edges(project: Project) -> dict:
    started = time.perf_counter()
    cfg = project.configs.edges
    edge_dir = ensure_directory(project.output_dir / "edges")
    external = project.path('edge_maps')
    outputs, pixels = [], 0
    for kf in tqdm(project.keyframes, desc="Edges", disable=_quiet()):
        name = _frame_name("edges", kf, ".png")
        if external is not None:
            edges = load_edge_map(external / name)
        else:
            edges = detect_edges(kf.image, cfg.low, cfg.high, cfg.smoothing_sigma)
        pixels += int(edges.mask.sum())
        outputs.append(save_edge_map(edge_dir / name, edges))
    return _report(project, "edges", cfg.model_dump(), {"cameras": project.path('cameras')}, outputs,
                   {"edge_maps": len(outputs), "edge_pixels": pixels}, started,
                   source="external" if external is not None else "detected")


def _load_edges(project: Project) -> List[EdgeMap]:
    return [load_edge_map(project.artifact(f"edges/{_frame_name('edges', kf, '.png')}", "edges"))
            for kf in project.keyframes]


def run_fit(project: Project) -> dict:
    started = time.perf_counter()
    cfg = project.configs.fit
    prior_path = project.artifact("prior_mesh.ply", "align")
    cloud_path = project.artifact("fused.ply", "fuse")
    lm_path = project.artifact("landmarks3d.json", "triangulate")
    edge_maps = _load_edges(project) if cfg.use_edges else None
    fitted, log = fit_mesh(load_mesh(prior_path), load_point_cloud(cloud_path), load_landmarks3d(lm_path),
                           project.table, project.keyframes, edge_maps, cfg,
                           project.configs.pointcloud, project.configs.edges)
    out = save_mesh(project.output_dir / "fitted.ply", fitted)
    textured = save_mesh(project.output_dir / "fitted_textured.ply",
                         fitted.with_colors(colorize_mesh(fitted, project.keyframes)))
    energy = save_energy_log(project.output_dir / "energy_log.json", log)
    last = log[-1]
    return _report(project, "fit", cfg.model_dump(),
                   {"prior_mesh": prior_path, "fused": cloud_path, "landmarks3d": lm_path}, [out, textured, energy],
                   {"solves": len(log), "pointcloud_constraints": last.n_pcl, "landmark_constraints": last.n_lms,
                    "edge_constraints": last.n_edges}, started, final_energy=last.total)


def run_eval(project: Project, mesh_path: Optional[PathLike] = None, align: bool = False,
             heatmap_max: Optional[float] = None) -> dict:
    started = time.perf_counter()
    gt_path = project.path('gt_mesh')
    if gt_path is None:
        raise ConfigurationError("evaluation needs a gt_mesh entry in the manifest")
    recon_path = Path(mesh_path) if mesh_path else project.artifact("fitted.ply", "fit")
    gt = load_mesh(gt_path)
    recon = load_mesh(recon_path)
    if align:
        recon, _, _ = rigid_align(recon, gt)
    acc, acc_d = accuracy(recon, gt)
    comp, _ = completion(recon, gt)
    diagonal = gt.bbox_diagonal
    d_max = heatmap_max if heatmap_max is not None else 0.02 * diagonal
    heatmap = project.output_dir / "heatmap_accuracy.ply"
    error_heatmap(recon, acc_d, d_max, heatmap)
    stats = {"schema_version": DOCUMENT_SCHEMA_VERSION, "accuracy": acc.model_dump(),
             "completion": comp.model_dump(), "gt_bbox_diagonal": diagonal, "aligned": align}
    out = save_json(project.output_dir / "eval.json", stats)
    return _report(project, "eval", {"align": align, "heatmap_max": d_max},
                   {"gt_mesh": gt_path, "reconstruction": recon_path}, [out, heatmap],
                   {"recon_vertices": recon.n_vertices, "gt_vertices": gt.n_vertices}, started,
                   accuracy_mean=acc.mean, completion_mean=comp.mean)


STAGES: Dict[str, Callable[[Project], dict]] = {
    "triangulate": run_triangulate,
    "align": run_align,
    "select-views": run_select_views,
    "mvs": run_mvs,
    "fuse": run_fuse,
    "edges": run_edges,
    "fit": run_fit,
}


def run_pipeline(project: Project, evaluate: bool = True) -> Dict[str, dict]:
    """Run every stage in order; evaluation runs when the manifest names a ground-truth mesh"""
    reports = {}
    for name, stage in STAGES.items():
        logger.info("Running stage %s", name)
        reports[name] = stage(project)
    if evaluate and project.path('gt_mesh') is not None:
        reports["eval"] = run_eval(project)
    return reports
