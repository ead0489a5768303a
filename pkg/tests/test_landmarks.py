import logging
import random

import numpy as np
import pytest

from config.pipeline_config import LandmarkConfig
from src.errors import GeometryError, TriangulationError
from src.landmarks import (
    reprojection_cost,
    reprojection_gradient,
    rigid_align,
    similarity_align,
    triangulate_all,
    triangulate_landmark,
    used_landmark_ids,
)
from src.models import CameraPose, CorrespondenceTable, Landmark3D, LandmarkObservation, TriMesh
from src.primitives import head_proxy
from tests.conftest import arc_rig, make_intrinsics, make_keyframe, random_rotation

X_TRUE = np.array([0.12, -0.07, 0.3])


def _observe(frames, X, landmark_id=30, noise=None, confidence=1.0):
    out = []
    for k, kf in enumerate(frames):
        cam = kf.pose.to_camera(X[None])[0]
        i = kf.intrinsics
        uv = np.array([i.fx * cam[0] / cam[2] + i.cx, i.fy * cam[1] / cam[2] + i.cy])
        if noise is not None:
            uv = uv + noise[k]
        out.append(LandmarkObservation(frame_id=kf.id, landmark_id=landmark_id, position=tuple(uv),
                                       confidence=confidence))
    return out


def _grid_search(obs, frames, center, half_width=0.2, levels=16):
    """Squared reprojection error minimised over successively refined 21^3 grids"""
    by_id = {kf.id: kf for kf in frames}
    axis = np.linspace(-1.0, 1.0, 21)
    offsets = np.stack(np.meshgrid(axis, axis, axis, indexing='ij'), axis=-1).reshape(-1, 3)
    center = np.asarray(center, dtype=np.float64)
    for _ in range(levels):
        grid = center + half_width * offsets
        cost = np.zeros(len(grid))
        for o in obs:
            kf = by_id[o.frame_id]
            i = kf.intrinsics
            cam = kf.pose.to_camera(grid)
            cost += (i.fx * cam[:, 0] / cam[:, 2] + i.cx - o.position[0]) ** 2
            cost += (i.fy * cam[:, 1] / cam[:, 2] + i.cy - o.position[1]) ** 2
        center = grid[np.argmin(cost)]
        # keep four grid steps around the best node
        half_width *= 0.4
    return center


@pytest.fixture
def frames():
    return arc_rig(n=5, step_deg=15.0, distance=3.0)


class TestTriangulation:
    def test_exact_observations(self, frames):
        lm = triangulate_landmark(_observe(frames, X_TRUE), frames)
        np.testing.assert_allclose(lm.position, X_TRUE, atol=1e-9)
        assert lm.rms_reprojection_error < 1e-6
        assert lm.num_views == 5 and lm.landmark_id == 30

    def test_noisy_refinement_is_stationary(self, frames, rng):
        obs = _observe(frames, X_TRUE, noise=rng.normal(0, 1.0, size=(5, 2)))
        lm = triangulate_landmark(obs, frames)
        X = np.array(lm.position)
        assert reprojection_cost(X, obs, frames) <= reprojection_cost(X_TRUE, obs, frames)
        assert np.linalg.norm(reprojection_gradient(X, obs, frames)) < 1e-3

    def test_gradient_matches_finite_differences(self, frames, rng):
        obs = _observe(frames, X_TRUE, noise=rng.normal(0, 2.0, size=(5, 2)))
        X = X_TRUE + [0.01, -0.02, 0.015]
        g = reprojection_gradient(X, obs, frames)
        h = 1e-6
        fd = [(reprojection_cost(X + h * e, obs, frames) - reprojection_cost(X - h * e, obs, frames)) / (2 * h)
              for e in np.eye(3)]
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-3)

    def test_observation_order_irrelevant(self, frames, rng):
        obs = _observe(frames, X_TRUE, noise=rng.normal(0, 1.0, size=(5, 2)))
        a = triangulate_landmark(obs, frames)
        shuffled = obs[:]
        random.Random(3).shuffle(shuffled)
        assert triangulate_landmark(shuffled, frames) == a

    def test_low_confidence_ignored(self, frames):
        obs = _observe(frames, X_TRUE)
        outlier = LandmarkObservation(frame_id=2, landmark_id=30, position=(5.0, 5.0), confidence=0.5)
        lm = triangulate_landmark(obs + [outlier], frames, min_confidence=0.9)
        np.testing.assert_allclose(lm.position, X_TRUE, atol=1e-9)
        assert lm.num_views == 5

    def test_robust_loss_resists_outlier(self, frames):
        noise = np.zeros((5, 2))
        noise[1] = [40.0, -25.0]
        obs = _observe(frames, X_TRUE, noise=noise)
        plain = np.array(triangulate_landmark(obs, frames).position)
        robust = np.array(triangulate_landmark(obs, frames, robust=True, huber_px=2.0).position)
        assert np.linalg.norm(robust - X_TRUE) < np.linalg.norm(plain - X_TRUE)

    def test_needs_two_confident_views(self, frames):
        obs = _observe(frames, X_TRUE)
        with pytest.raises(TriangulationError):
            triangulate_landmark(obs[:1], frames)
        with pytest.raises(TriangulationError):
            triangulate_landmark(_observe(frames, X_TRUE, confidence=0.5), frames)

    def test_point_behind_camera(self):
        intr = make_intrinsics()
        front = make_keyframe(0, CameraPose.look_at([0, 0, 3.0], [0, 0, 0]), intr)
        away = make_keyframe(1, CameraPose.look_at([0, 0, -3.0], [0, 0, -6.0]), intr)
        X = np.array([0.3, 0.2, 0.5])
        obs = []
        for kf in (front, away):
            cam = kf.pose.to_camera(X[None])[0]
            obs.append(LandmarkObservation(frame_id=kf.id, landmark_id=40, confidence=1.0,
                                           position=(60 * cam[0] / cam[2] + intr.cx, 60 * cam[1] / cam[2] + intr.cy)))
        with pytest.raises(TriangulationError):
            triangulate_landmark(obs, [front, away])

    def test_unknown_frame_and_mixed_ids(self, frames):
        obs = _observe(frames, X_TRUE)
        stray = LandmarkObservation(frame_id=99, landmark_id=30, position=(1.0, 1.0), confidence=1.0)
        with pytest.raises(TriangulationError):
            triangulate_landmark(obs + [stray], frames)
        with pytest.raises(ValueError):
            triangulate_landmark(obs + _observe(frames, X_TRUE, landmark_id=31), frames)

    def test_coincident_camera_centers(self):
        intr = make_intrinsics()
        eye = [0.0, 0.0, 3.0]
        frames = [make_keyframe(k, CameraPose.look_at(eye, target), intr)
                  for k, target in enumerate(([0.0, 0.0, 0.0], [0.2, 0.0, 0.0], [0.0, -0.2, 0.0]))]
        with pytest.raises(TriangulationError, match="collinear"):
            triangulate_landmark(_observe(frames, X_TRUE), frames)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_refined_grid_search(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-0.2, 0.2, size=3)
        intr = make_intrinsics()
        frames = []
        for k in range(8):
            polar = np.radians(rng.uniform(5.0, 40.0))
            azimuth = rng.uniform(0.0, 2 * np.pi)
            eye = 3.0 * np.array([np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)])
            frames.append(make_keyframe(k, CameraPose.look_at(eye, rng.normal(0.0, 0.05, size=3)), intr))
        obs = _observe(frames, X, noise=rng.normal(0.0, 0.5, size=(8, 2)))
        lm = triangulate_landmark(obs, frames, robust=False)
        np.testing.assert_allclose(lm.position, _grid_search(obs, frames, X), atol=1e-6)


class TestTriangulateAll:
    def test_subset_rules_and_ordering(self, frames, caplog):
        obs = []
        for lid, X in ((45, X_TRUE), (5, X_TRUE), (31, X_TRUE + 0.05), (102, X_TRUE - 0.05)):
            obs += _observe(frames, np.asarray(X), landmark_id=lid)
        obs += _observe(frames[:1], X_TRUE, landmark_id=50)
        with caplog.at_level(logging.WARNING):
            lms = triangulate_all(obs, frames, LandmarkConfig(robust=False))
        assert [lm.landmark_id for lm in lms] == [31, 45, 102]
        assert any("landmark 50" in r.getMessage() for r in caplog.records)
        no_ears = triangulate_all(obs, frames, LandmarkConfig(), use_ear_landmarks=False)
        assert [lm.landmark_id for lm in no_ears] == [31, 45]

    def test_table_subset(self):
        table = CorrespondenceTable(entries={}, excluded_landmark_ids=[0, 60], ear_contour_ids=[100, 101])
        assert used_landmark_ids([0, 5, 60, 100, 104], table) == [5, 100]
        assert used_landmark_ids([0, 5, 60, 100], None) == [60, 100]


class TestAlignment:
    def test_similarity_recovers_transform(self, rng):
        template = head_proxy(2)
        R = random_rotation(rng)
        ids = {k + 20: int(v) for k, v in enumerate(rng.choice(template.n_vertices, 12, replace=False))}
        table = CorrespondenceTable(entries=ids)
        lms = [Landmark3D(landmark_id=lid, position=tuple(1.3 * R @ template.vertices[v] + [0.5, 0.0, -1.0]),
                          rms_reprojection_error=0.0, num_views=2) for lid, v in ids.items()]
        aligned, s, R_est, t = similarity_align(template, table, lms)
        assert s == pytest.approx(1.3)
        np.testing.assert_allclose(aligned.vertices, 1.3 * template.vertices @ R.T + [0.5, 0.0, -1.0], atol=1e-9)

    def test_ear_landmarks_left_to_the_fit(self, rng):
        template = head_proxy(2)
        picks = rng.choice(template.n_vertices, 8, replace=False)
        ids = {20 + k: int(v) for k, v in enumerate(picks[:6])}
        ids.update({100: int(picks[6]), 101: int(picks[7])})
        table = CorrespondenceTable(entries=ids, ear_contour_ids=[100, 101])
        lms = [Landmark3D(landmark_id=lid, position=tuple(2.0 * template.vertices[v] + [0.1, 0.2, 0.3]),
                          rms_reprojection_error=0.0, num_views=2) for lid, v in ids.items()]
        for k in (-2, -1):
            lms[k] = lms[k].model_copy(update={"position": tuple(np.array(lms[k].position) + [0.5, -0.4, 0.3])})
        _, s, _, t = similarity_align(template, table, lms)
        assert s == pytest.approx(2.0)
        np.testing.assert_allclose(t, [0.1, 0.2, 0.3], atol=1e-9)
        _, s_ears, _, _ = similarity_align(template, table, lms, use_ear_landmarks=True)
        assert s_ears != pytest.approx(2.0)

    def test_collinear_rejected(self):
        mesh = TriMesh(vertices=[[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], faces=[[0, 1, 3], [1, 2, 3]])
        table = CorrespondenceTable(entries={20: 0, 21: 1, 22: 2})
        lms = [Landmark3D(landmark_id=20 + k, position=(float(k), 0.0, 1.0), rms_reprojection_error=0.0, num_views=2)
               for k in range(3)]
        with pytest.raises(GeometryError):
            similarity_align(mesh, table, lms)
        with pytest.raises(GeometryError):
            similarity_align(mesh, table, lms[:2])

    def test_rigid_icp_undoes_small_motion(self):
        target = head_proxy(3)
        a = np.radians(1.5)
        R = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
        moved = target.with_vertices(target.vertices @ R.T + [0.005, -0.003, 0.0])
        aligned, R_est, t = rigid_align(moved, target)
        np.testing.assert_allclose(aligned.vertices, target.vertices, atol=1e-9)
        np.testing.assert_allclose(R_est @ R, np.eye(3), atol=1e-9)
