import json
import shutil

import numpy as np
import pytest

from config.pipeline_config import SynthConfig
from main import main
from src.errors import ConfigurationError, MissingArtifactError
from src.io_formats import load_depth_map, load_json, load_manifest, load_mesh, save_depth_map, save_manifest
from src.models import DepthMap
from src.pipeline import STAGES, Project, run_align, run_eval, run_fuse, run_pipeline
from src.primitives import ellipsoid_template, head_proxy
from src.synth import synth_scene

SMALL = SynthConfig(n_views=6, arc_degrees=120.0, width=64, height=48, subdivisions=2, seed=3)
QUICK = {"patchmatch": {"iterations": 2}, "fit": {"stiffness_schedule": [20.0, 5.0, 1.0], "inner_max_iters": 2}}


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("project")
    return synth_scene(head_proxy(2), out, SMALL, template=ellipsoid_template(2))


@pytest.fixture
def manifest_without_gt(manifest, tmp_path):
    m, root = load_manifest(manifest)
    copy = m.model_copy(update={"gt_mesh": None, "output_dir": str(tmp_path / "out")})
    for field in ("cameras", "landmarks", "correspondence", "template"):
        copy = copy.model_copy(update={field: str(root / getattr(m, field))})
    return save_manifest(tmp_path / "manifest.json", copy)


def test_stage_needs_upstream_artifact(manifest, tmp_path):
    project = Project(manifest, output_dir=tmp_path)
    with pytest.raises(MissingArtifactError) as info:
        run_align(project)
    assert info.value.stage == "triangulate"
    assert info.value.exit_code == 4


def test_eval_needs_ground_truth(manifest_without_gt):
    with pytest.raises(ConfigurationError):
        run_eval(Project(manifest_without_gt))


def test_invalid_override_rejected(manifest, tmp_path):
    with pytest.raises(ConfigurationError):
        Project(manifest, {"fusion": {"min_consistent_views": 0}}, output_dir=tmp_path)


def test_override_reaches_stage_and_report(manifest, tmp_path):
    project = Project(manifest, {"view_selection": {"num_sources": 2}}, output_dir=tmp_path)
    for name in ("triangulate", "align", "select-views"):
        STAGES[name](project)
    report = load_json(tmp_path / "reports" / "select-views.json")
    assert report["config"]["num_sources"] == 2
    assert set(report["inputs"]) == {"prior_mesh", "cameras"}
    assert all(len(h) == 64 for h in report["inputs"].values())
    views = load_json(tmp_path / "views.json")
    assert sorted(views["sources"]) == [str(i) for i in range(6)]
    assert all(len(v) == 2 for v in views["sources"].values())
    tri = load_json(tmp_path / "reports" / "triangulate.json")
    assert tri["counts"]["landmarks"] > 30
    assert tri["outputs"] == ["landmarks3d.json"]


def test_fuse_report_hashes_depth_maps(manifest, tmp_path):
    _, root = load_manifest(manifest)
    shutil.copytree(root / "synth_depth", tmp_path / "depth")
    project = Project(manifest, output_dir=tmp_path)
    first = run_fuse(project)["inputs"]
    assert {f"depth/depth_{k:04d}.pfm" for k in range(6)} <= set(first)
    assert "depth/depth_0000.normal.pfm" in first
    dm = load_depth_map(tmp_path / "depth" / "depth_0002.pfm")
    save_depth_map(tmp_path / "depth" / "depth_0002.pfm",
                   DepthMap(depth=np.where(dm.valid, dm.depth * 1.001, np.inf), valid=dm.valid, normal=dm.normal))
    second = run_fuse(project)["inputs"]
    assert second["depth/depth_0002.pfm"] != first["depth/depth_0002.pfm"]
    assert second["depth/depth_0001.pfm"] == first["depth/depth_0001.pfm"]
    assert second["cameras"] == first["cameras"]


@pytest.mark.slow
def test_staged_run_matches_pipeline(manifest, tmp_path):
    staged = Project(manifest, QUICK, output_dir=tmp_path / "staged")
    for stage in STAGES.values():
        stage(staged)
    whole = Project(manifest, QUICK, output_dir=tmp_path / "whole")
    reports = run_pipeline(whole)
    assert list(reports) == list(STAGES) + ["eval"]
    for name in ("landmarks3d.json", "prior_mesh.ply", "views.json", "depth/depth_0002.pfm", "fused.ply",
                 "edges/edges_0004.png", "fitted.ply"):
        assert (staged.output_dir / name).read_bytes() == (whole.output_dir / name).read_bytes(), name

    fitted = load_mesh(whole.output_dir / "fitted.ply")
    gt = load_mesh(whole.path("gt_mesh"))
    np.testing.assert_array_equal(fitted.faces, gt.faces)
    evaluation = json.loads((whole.output_dir / "eval.json").read_text())
    assert np.isfinite(evaluation["accuracy"]["mean"])
    assert evaluation["accuracy"]["count"] == fitted.n_vertices
    assert reports["eval"]["accuracy_mean"] < 0.1 * gt.bbox_diagonal
    energy = load_json(whole.output_dir / "energy_log.json")["rows"]
    assert len(energy) == reports["fit"]["counts"]["solves"]
    assert load_mesh(whole.output_dir / "fitted_textured.ply").vertex_colors is not None
    assert (whole.output_dir / "heatmap_accuracy.ply").exists()


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """The default synthetic head project run through every stage"""
    root = tmp_path_factory.mktemp("full")
    manifest = synth_scene(head_proxy(), root / "project", SynthConfig(), template=ellipsoid_template())
    project = Project(manifest, output_dir=root / "out")
    run_pipeline(project)
    return manifest, project.output_dir


def _scores(out_dir):
    evaluation = load_json(out_dir / "eval.json")
    return evaluation["accuracy"], evaluation["completion"], evaluation["gt_bbox_diagonal"]


@pytest.mark.slow
def test_default_scene_is_reconstructed(full_run):
    _, out = full_run
    acc, comp, diagonal = _scores(out)
    for stats in (acc, comp):
        assert stats["mean"] <= 0.02 * diagonal
        assert stats["median"] <= 0.01 * diagonal


@pytest.mark.slow
@pytest.mark.parametrize("fit_override, stages", [
    ({"use_edges": False}, ("fit",)),
    ({"use_ear_landmarks": False}, ("triangulate", "fit")),
], ids=["no-edges", "no-ears"])
def test_dropping_a_constraint_costs_accuracy(full_run, tmp_path, fit_override, stages):
    manifest, out = full_run
    acc, comp, _ = _scores(out)
    shutil.copytree(out, tmp_path / "out")
    project = Project(manifest, {"fit": fit_override}, output_dir=tmp_path / "out")
    for name in stages:
        STAGES[name](project)
    run_eval(project)
    ablated_acc, ablated_comp, _ = _scores(project.output_dir)
    assert ablated_acc["mean"] > acc["mean"] or ablated_comp["mean"] > comp["mean"]


class TestCli:
    def test_synth_command(self, tmp_path):
        code = main(["synth", str(tmp_path / "demo"), "--views", "3", "--width", "40", "--height", "30",
                     "--subdivisions", "2"])
        assert code == 0
        assert (tmp_path / "demo" / "manifest.json").exists()

    def test_missing_artifact_exit_code(self, manifest, tmp_path):
        assert main(["align", str(manifest), "--output-dir", str(tmp_path)]) == 4

    def test_missing_manifest_exit_code(self, tmp_path):
        assert main(["triangulate", str(tmp_path / "nope.json")]) == 2

    def test_bad_override_exit_code(self, manifest, tmp_path):
        assert main(["fit", str(manifest), "--output-dir", str(tmp_path), "--stiffness-schedule", "1,5"]) == 2

    def test_eval_without_ground_truth_exit_code(self, manifest_without_gt):
        assert main(["eval", str(manifest_without_gt)]) == 2

    def test_triangulate_command(self, manifest, tmp_path, capsys):
        assert main(["triangulate", str(manifest), "--output-dir", str(tmp_path)]) == 0
        assert (tmp_path / "landmarks3d.json").exists()
        assert "landmarks" in capsys.readouterr().out
