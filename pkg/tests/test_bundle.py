import numpy as np
import pytest

from rigsfm import so3
from rigsfm.bundle import (
    BaOptions,
    Observations,
    _reprojection_residual,
    ba_cost,
    bundle_adjust,
    filter_observations,
    multi_camera_ba,
    observations_from_graph,
    reproject,
    reprojection_errors,
    single_camera_ba,
)
from rigsfm.config import PipelineConfig
from rigsfm.pipeline import solve
from rigsfm.scene import Intrinsics
from rigsfm.solvers import LeastSquaresProblem, RobustKernel, check_jacobian
from rigsfm.synthetic import SceneConfig, default_rig, generate_scene

INTR = Intrinsics(500.0, 320.0, 240.0, 640.0, 480.0)


def rmse(state, obs):
    err, front = reprojection_errors(state, obs)
    return float(np.sqrt(np.mean(err[front] ** 2)))


@pytest.fixture(scope="module")
def pixel_scene():
    cfg = SceneConfig(num_units=6, slots=default_rig(2), num_points=120, extent=20.0, seed=5)
    truth, g = generate_scene(cfg)
    return truth, g, observations_from_graph(g, truth)


@pytest.fixture(scope="module")
def noisy_pixel_scene():
    cfg = SceneConfig(num_units=6, slots=default_rig(2), num_points=120, extent=20.0, pixel_noise_sigma=1.0, seed=5)
    truth, g = generate_scene(cfg)
    return truth, g, observations_from_graph(g, truth)


# -- projection -------------------------------------------------------------------


def test_reproject_on_axis():
    x = reproject(INTR, np.eye(3), np.zeros(3), np.eye(3), np.zeros(3), [0.0, 0.0, 1.0])
    assert np.allclose(x, [320.0, 240.0])


def test_reproject_behind_camera():
    assert reproject(INTR, np.eye(3), np.zeros(3), np.eye(3), np.zeros(3), [0.0, 0.0, -1.0]) is None
    assert reproject(INTR, np.eye(3), np.zeros(3), np.eye(3), np.zeros(3), [1.0, 0.0, 0.0]) is None


def test_reproject_matches_composed_pose(rng):
    for _ in range(50):
        Rr, Rg = so3.exp(rng.normal(size=3)), so3.exp(rng.normal(size=3))
        t, c = rng.normal(size=3), rng.normal(size=3)
        R = Rr @ Rg
        ci = c - R.T @ t
        p = ci + R.T @ np.array([*rng.normal(size=2), rng.uniform(1, 10)])
        x_cam = R @ (p - ci)
        expected = INTR.focal * x_cam[:2] / x_cam[2] + [INTR.cx, INTR.cy]
        assert np.abs(reproject(INTR, Rr, t, Rg, c, p) - expected).max() < 1e-10


def test_observations_from_graph_reproduce_pixels(pixel_scene):
    truth, g, obs = pixel_scene
    assert len(obs) > 0
    err, front = reprojection_errors(truth, obs)
    assert front.all() and err.max() < 1e-8


def test_observation_arrays_must_agree():
    with pytest.raises(ValueError):
        Observations([0, 1], [0], np.zeros((2, 2)))


# -- adjustment -------------------------------------------------------------------


def test_ground_truth_is_stationary(pixel_scene):
    truth, g, obs = pixel_scene
    out, kept, reports = bundle_adjust(truth, obs)
    assert len(kept) == len(obs)
    for u in truth.unit_position:
        assert np.abs(out.unit_position[u] - truth.unit_position[u]).max() < 1e-10
        assert np.abs(out.unit_rotation[u] - truth.unit_rotation[u]).max() < 1e-10
    for s in truth.rig.internal_rotation:
        assert np.abs(out.rig.internal_translation[s] - truth.rig.internal_translation[s]).max() < 1e-10
    assert max(np.abs(out.points[k] - p).max() for k, p in truth.points.items()) < 1e-10
    assert [r["stage"] for r in reports] == ["ba_rotations_fixed", "filter", "ba_full"]


def test_point_perturbation_recovered(pixel_scene):
    truth, g, obs = pixel_scene
    rng = np.random.default_rng(0)
    start = truth.copy()
    # 1% of the 20 m trajectory
    start.points = {k: p + rng.normal(scale=0.2, size=3) for k, p in truth.points.items()}
    before = rmse(start, obs)
    out, rep = multi_camera_ba(start, obs, BaOptions(stage="full"))
    assert rmse(out, obs) * 10 <= before
    assert rep["objective_after"] <= rep["objective_before"]


def test_gauge_is_bit_identical(noisy_pixel_scene):
    truth, g, obs = noisy_pixel_scene
    rng = np.random.default_rng(1)
    start = truth.copy()
    for u in start.unit_position:
        start.unit_rotation[u] = so3.exp(rng.normal(scale=0.01, size=3)) @ start.unit_rotation[u]
        start.unit_position[u] = start.unit_position[u] + rng.normal(scale=0.1, size=3)
    out, _ = multi_camera_ba(start, obs, BaOptions(stage="full"), anchor_unit=0, reference_slot=0)
    assert np.array_equal(out.unit_rotation[0], start.unit_rotation[0])
    assert np.array_equal(out.unit_position[0], start.unit_position[0])
    assert np.array_equal(out.rig.internal_rotation[0], start.rig.internal_rotation[0])
    assert np.array_equal(out.rig.internal_translation[0], start.rig.internal_translation[0])
    assert not np.array_equal(out.unit_position[1], start.unit_position[1])


def test_rotations_fixed_stage_holds_rotations(noisy_pixel_scene):
    truth, g, obs = noisy_pixel_scene
    start = truth.copy()
    start.unit_position = {u: c + 0.05 for u, c in truth.unit_position.items()}
    out, _ = multi_camera_ba(start, obs, BaOptions(stage="rotations_fixed"))
    for u in truth.unit_rotation:
        assert np.array_equal(out.unit_rotation[u], start.unit_rotation[u])
    for s in truth.rig.internal_rotation:
        assert np.array_equal(out.rig.internal_rotation[s], start.rig.internal_rotation[s])


def test_no_observations_is_an_error(pixel_scene):
    truth, g, obs = pixel_scene
    with pytest.raises(ValueError):
        multi_camera_ba(truth, obs.select(np.zeros(len(obs), bool)))


def test_behind_camera_observations_are_excluded(pixel_scene):
    truth, g, obs = pixel_scene
    state = truth.copy()
    k = int(obs.point_ids[0])
    # move one point behind the camera of its first observation
    (R, c) = state.camera_poses()[int(obs.image_ids[0])]
    state.points[k] = c - 3.0 * R[2]
    _, rep = multi_camera_ba(state, obs, BaOptions(stage="rotations_fixed", max_iterations=5))
    assert rep["excluded_behind"] >= 1
    assert rep["active_observations"] + rep["excluded_behind"] == len(obs)


def single_slot_costs():
    """Final costs of rig BA and ordinary BA on a one-slot scene, plus rig BA's cost recomputed."""
    cfg = SceneConfig(num_units=6, slots=default_rig(1), num_points=100, extent=20.0, pixel_noise_sigma=1.0, seed=2)
    truth, g = generate_scene(cfg)
    obs = observations_from_graph(g, truth)
    rng = np.random.default_rng(3)
    start = truth.copy()
    for u in start.unit_position:
        if u != 0:
            start.unit_rotation[u] = so3.exp(rng.normal(scale=0.01, size=3)) @ start.unit_rotation[u]
            start.unit_position[u] = start.unit_position[u] + rng.normal(scale=0.2, size=3)
    start.points = {k: p + rng.normal(scale=0.2, size=3) for k, p in start.points.items()}
    out, rep = multi_camera_ba(start, obs, BaOptions(stage="full"))

    poses = start.camera_poses()
    anchor = next(i for i, n in start.images.items() if n.unit_id == 0)
    intr = {i: start.intrinsics[n.intrinsics_id] for i, n in start.images.items()}
    R, C, P, res = single_camera_ba({i: p[0] for i, p in poses.items()}, {i: p[1] for i, p in poses.items()},
                                    start.points, obs, intr, anchor=anchor)
    return rep["objective_after"], res.final_cost, ba_cost(out, obs)


def test_single_slot_matches_ordinary_ba():
    rig, single, recomputed = single_slot_costs()
    assert abs(single - rig) <= 1e-8 * rig
    assert abs(recomputed - rig) <= 1e-8 * rig


def _random_problem(rng, refine_focal):
    nu, ns, npnt, nobs = 5, 2, 20, 80
    Rg = so3.exp(rng.normal(size=(nu, 3)))
    c = rng.normal(size=(nu, 3))
    Rr = so3.exp(rng.normal(scale=0.3, size=(ns, 3)))
    t = rng.normal(scale=0.5, size=(ns, 3))
    u = rng.integers(nu, size=nobs)
    s = rng.integers(ns, size=nobs)
    k = rng.integers(npnt, size=nobs)
    # place each point in front of the first camera that sees it
    p = rng.normal(size=(npnt, 3))
    for j in range(npnt):
        m = np.flatnonzero(k == j)
        if len(m):
            R = Rr[s[m[0]]] @ Rg[u[m[0]]]
            ci = c[u[m[0]]] - R.T @ t[s[m[0]]]
            p[j] = ci + R.T @ np.array([*rng.normal(size=2), rng.uniform(3, 8)])
    X = np.einsum("nij,nj->ni", Rr[s] @ Rg[u], p[k] - c[u]) + t[s]
    keep = X[:, 2] > 0.5
    px = rng.uniform(0, 640, size=(nobs, 2))
    focal = np.full(nobs, 500.0)
    center = np.tile([320.0, 240.0], (nobs, 1))
    prob = LeastSquaresProblem()
    prob.add_parameters("unit_rotation", Rg, "so3")
    prob.add_parameters("unit_position", c)
    prob.add_parameters("rig_rotation", Rr, "so3")
    prob.add_parameters("rig_translation", t)
    prob.add_parameters("points", p)
    blocks = [("unit_rotation", u[keep]), ("unit_position", u[keep]), ("rig_rotation", s[keep]),
              ("rig_translation", s[keep]), ("points", k[keep])]
    if refine_focal:
        prob.add_parameters("focal", np.array([[500.0]]))
        blocks.append(("focal", np.zeros(keep.sum(), dtype=np.int64)))
        fn = _reprojection_residual(px[keep], center[keep])
    else:
        fn = _reprojection_residual(px[keep], center[keep], focal[keep])
    prob.add_residuals(fn, blocks, RobustKernel("huber", 2.0), "reprojection")
    return prob


@pytest.mark.parametrize("refine_focal", [False, True])
def test_reprojection_jacobian_random_states(refine_focal):
    rng = np.random.default_rng(21)
    worst = max(max(check_jacobian(_random_problem(rng, refine_focal)).values()) for _ in range(100))
    assert worst < 1e-4


# -- filtering and schedule -------------------------------------------------------


def test_filter_keeps_everything_when_small(noisy_pixel_scene):
    truth, g, obs = noisy_pixel_scene
    err, _ = reprojection_errors(truth, obs)
    assert err.max() < 8.0
    kept, rep = filter_observations(truth, obs, 8.0)
    assert len(kept) == len(obs) and rep["dropped_error"] == 0 and rep["dropped_points"] == 0


def test_filter_drops_exactly_the_outlier(pixel_scene):
    truth, g, obs = pixel_scene
    units = np.array([truth.images[i].unit_id for i in obs.image_ids])
    # an observation whose point keeps two units after losing it
    rest = lambda k: (obs.point_ids == obs.point_ids[k]) & (np.arange(len(obs)) != k)
    k = next(k for k in range(len(obs)) if len(set(units[rest(k)])) >= 2)
    px = obs.pixels.copy()
    px[k] += [100.0, 0.0]
    kept, rep = filter_observations(truth, Observations(obs.image_ids, obs.point_ids, px), 8.0)
    assert len(kept) == len(obs) - 1 and rep["dropped_error"] == 1 and rep["dropped_points"] == 0
    assert not np.any((kept.image_ids == obs.image_ids[k]) & (kept.point_ids == obs.point_ids[k]))


def test_filter_drops_unsupported_point(pixel_scene):
    truth, g, obs = pixel_scene
    pid = int(obs.point_ids[0])
    rows = np.flatnonzero(obs.point_ids == pid)
    px = obs.pixels.copy()
    px[rows[1:]] += 50.0
    kept, rep = filter_observations(truth, Observations(obs.image_ids, obs.point_ids, px), 8.0)
    assert pid not in set(kept.point_ids.tolist())
    assert rep["dropped_points"] == 1
    assert len(kept) == len(obs) - len(rows)


def test_two_stage_schedule_not_worse():
    """Rotations-fixed then full against full alone, both from the averaging output."""
    wins = 0
    for seed in range(10):
        cfg = SceneConfig(num_units=12, slots=default_rig(3), num_points=300, extent=40.0, pixel_noise_sigma=1.0,
                          rotation_noise_sigma=2.0, edge_outlier_fraction=0.1, bearing_outlier_fraction=0.05, seed=seed)
        truth, g = generate_scene(cfg)
        start = solve(g, PipelineConfig({"stages.skip": ["ba"]})).state
        obs = observations_from_graph(g, start)
        staged, kept, _ = bundle_adjust(start, obs)
        direct, _ = multi_camera_ba(start, obs, BaOptions(stage="full"))
        wins += ba_cost(staged, kept) <= ba_cost(direct, kept) * (1 + 1e-6)
    assert wins == 10
