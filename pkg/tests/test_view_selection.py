import math
import random

import numpy as np
import pytest

from config.pipeline_config import ViewSelConfig
from src.errors import GeometryError
from src.models import CameraPose
from src.rasterizer import render_depth
from src.view_selection import baseline_angle, gaussian_weight, pair_score, select_source_views
from tests.conftest import arc_rig, make_intrinsics, make_keyframe

CFG = ViewSelConfig()


def test_weight_peaks_at_theta0():
    assert gaussian_weight(CFG.theta0, CFG) == 1.0


def test_weight_branches():
    # one sigma to either side of the peak
    assert gaussian_weight(CFG.theta0 - CFG.sigma1, CFG) == pytest.approx(math.exp(-0.5))
    assert gaussian_weight(CFG.theta0 + CFG.sigma2, CFG) == pytest.approx(math.exp(-0.5))
    assert gaussian_weight(0.0, CFG) < gaussian_weight(20.0, CFG)


def test_weight_domain():
    with pytest.raises(GeometryError):
        gaussian_weight(-1.0, CFG)
    with pytest.raises(GeometryError):
        gaussian_weight(181.0, CFG)


def test_baseline_angle():
    assert baseline_angle([1, 0, 0], [0, 1, 0], [0, 0, 0]) == pytest.approx(90.0)
    assert baseline_angle([2, 0, 0], [5, 0, 0], [0, 0, 0]) == pytest.approx(0.0, abs=1e-5)
    with pytest.raises(GeometryError):
        baseline_angle([0, 0, 0], [1, 0, 0], [0, 0, 0])


def test_pair_score_order_invariant(rng):
    frames = arc_rig(n=2, step_deg=10.0)
    pts = list(rng.uniform(-0.5, 0.5, size=(200, 3)))
    a = pair_score(frames[0], frames[1], pts, CFG)
    random.Random(7).shuffle(pts)
    assert pair_score(frames[0], frames[1], pts, CFG) == a
    assert pair_score(frames[0], frames[1], [], CFG) == 0.0


def test_neighbours_on_arc_selected(sphere):
    frames = arc_rig(n=9, step_deg=10.0)
    selection = select_source_views(frames, sphere, ViewSelConfig(num_sources=2))
    assert sorted(selection) == list(range(9))
    assert set(selection[4]) == {3, 5}
    assert selection[0] == [1, 2]
    for ref, sources in selection.items():
        assert ref not in sources and len(sources) == 2


def test_all_views_when_fewer_than_requested(sphere):
    frames = arc_rig(n=4, step_deg=10.0)
    selection = select_source_views(frames, sphere, ViewSelConfig(num_sources=10))
    assert all(len(v) == 3 for v in selection.values())


def test_needs_two_keyframes(sphere):
    with pytest.raises(GeometryError):
        select_source_views(arc_rig(n=1), sphere, CFG)


def _rescore_by_hand(frames, mesh, cfg):
    """Pair scores from per-vertex loops over rendered depth maps"""
    visible = []
    for kf in frames:
        depth = render_depth(mesh, kf.pose, kf.intrinsics).depth
        i = kf.intrinsics
        seen = set()
        for v, X in enumerate(mesh.vertices):
            x, y, z = kf.pose.to_camera(X[None])[0]
            if z <= 0.0:
                continue
            col, row = round(i.fx * x / z + i.cx), round(i.fy * y / z + i.cy)
            if 0 <= col < i.width and 0 <= row < i.height and z <= depth[row, col] * (1.0 + cfg.visibility_tolerance):
                seen.add(v)
        visible.append(seen)
    scores = {}
    for a, kf_a in enumerate(frames):
        for b, kf_b in enumerate(frames):
            total = 0.0
            for v in sorted(visible[a] & visible[b]):
                ra = kf_a.pose.center - mesh.vertices[v]
                rb = kf_b.pose.center - mesh.vertices[v]
                cos = float(ra @ rb) / (np.linalg.norm(ra) * np.linalg.norm(rb))
                theta = math.degrees(math.acos(max(-1.0, min(1.0, cos))))
                sigma = cfg.sigma1 if theta <= cfg.theta0 else cfg.sigma2
                total += math.exp(-((theta - cfg.theta0) ** 2) / (2.0 * sigma ** 2))
            scores[kf_a.id, kf_b.id] = total
    return scores


def test_ranking_matches_hand_rescoring(sphere):
    intr = make_intrinsics()
    eyes = [(0.0, 0.0), (-9.0, 3.0), (13.0, -2.0), (24.0, 6.0), (-31.0, -5.0)]
    frames = []
    for k, (az, el) in enumerate(eyes):
        a, e = np.radians(az), np.radians(el)
        eye = 4.0 * np.array([np.sin(a) * np.cos(e), np.sin(e), np.cos(a) * np.cos(e)])
        frames.append(make_keyframe(k, CameraPose.look_at(eye, [0.0, 0.0, 0.0]), intr))
    cfg = ViewSelConfig(num_sources=4)
    scores = _rescore_by_hand(frames, sphere, cfg)
    selection = select_source_views(frames, sphere, cfg)
    for kf in frames:
        others = [o.id for o in frames if o.id != kf.id]
        assert selection[kf.id] == sorted(others, key=lambda j: (-scores[kf.id, j], j))
