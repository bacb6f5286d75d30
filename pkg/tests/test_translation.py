import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import linprog

from rigsfm import so3
from rigsfm.evaluation import errors_from_poses
from rigsfm.scene import ImageNode, ReconstructionState, RelativePoseEdge, RigCalibration, Track, TrackObservation, ViewGraph
from rigsfm.solvers import check_jacobian
from rigsfm.synthetic import SceneConfig, default_rig, generate_scene
from rigsfm.translation import (
    VARIANTS,
    TranslationOptions,
    _build_problem,
    average_translations,
    init_positions_l1,
    joint_refine,
    make_cameras,
    make_tracks,
    refine_positions_angle,
    triangulate_l1,
)


def perturb_direction(rng, v, sigma_deg):
    if not sigma_deg:
        return v
    w = rng.normal(size=3)
    w -= (w @ v) * v
    return so3.exp(np.radians(sigma_deg) * rng.normal() * w / np.linalg.norm(w)) @ v


def build_scene(unit_R, unit_c, rig, pairs, points=None, rng=None, sigma_deg=0.0, bearing_sigma_deg=0.0):
    """Hand-made rig scene. ``rig`` is a list of (R^r, t^r); ``pairs`` holds ((u, s), (v, t))."""
    nslot = len(rig)
    images = {u * nslot + s: ImageNode(u * nslot + s, u, s) for u in range(len(unit_R)) for s in range(nslot)}
    truth = ReconstructionState(images, dict(enumerate(unit_R)), {u: np.asarray(c, float) for u, c in enumerate(unit_c)},
                                RigCalibration({s: r for s, (r, _) in enumerate(rig)},
                                               {s: np.asarray(t, float) for s, (_, t) in enumerate(rig)}),
                                {} if points is None else dict(enumerate(points)))
    poses = truth.camera_poses()
    edges = []
    for (u, s), (v, t) in pairs:
        i, j = u * nslot + s, v * nslot + t
        (Ri, ci), (Rj, cj) = poses[i], poses[j]
        d = Rj @ (ci - cj)
        d = perturb_direction(rng, d / np.linalg.norm(d), sigma_deg)
        edges.append(RelativePoseEdge.from_matrix(i, j, Rj @ Ri.T, d, 100))
    tracks = []
    for k, p in enumerate([] if points is None else points):
        obs = []
        for i, (R, c) in poses.items():
            b = R @ (p - c)
            b = perturb_direction(rng, b / np.linalg.norm(b), bearing_sigma_deg)
            obs.append(TrackObservation(i, bearing=b))
        tracks.append(Track(k, tuple(obs)))
    return truth, ViewGraph(images, tuple(edges), tuple(tracks))


def rotations_of(truth):
    return {i: R for i, (R, _) in truth.camera_poses().items()}


def median_position_error(truth, res):
    est = ReconstructionState(truth.images, truth.unit_rotation, res.unit_position,
                              RigCalibration(truth.rig.internal_rotation, res.internal_translation), res.points)
    return errors_from_poses(est.camera_poses(), truth.camera_poses()).median_position


def square_scene(rng=None, sigma_deg=0.0, n_per_side=3, points=None, bearing_sigma_deg=0.0):
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]], dtype=float) * 10
    pos, yaw = [], []
    for k in range(4):
        for a in np.linspace(0, 1, n_per_side, endpoint=False):
            pos.append(np.append(corners[k] + a * (corners[k + 1] - corners[k]), 0.0))
            yaw.append(np.pi / 2 * k)
    unit_R = [so3.exp(np.array([0.0, 0.0, y])) for y in yaw]
    rig = [(np.eye(3), np.zeros(3)), (so3.exp(np.array([0.0, 0.4, 0.0])), np.array([-0.8, 0.1, 0.2]))]
    n = len(pos)
    pairs = [((u, s), ((u + 1) % n, s)) for u in range(n) for s in (0, 1)]
    pairs += [((u, 0), ((u + 2) % n, 1)) for u in range(n)] + [((u, 0), (u, 1)) for u in range(n)]
    return build_scene(unit_R, pos, rig, pairs, points, rng, sigma_deg, bearing_sigma_deg)


# -- L1 initialization --------------------------------------------------------------


def test_two_units_one_edge():
    truth, g = build_scene([np.eye(3)] * 2, [[0, 0, 0], [-3, 0, 0]], [(np.eye(3), np.zeros(3))], [((0, 0), (1, 0))])
    cams = make_cameras(g, rotations_of(truth))
    c, t, s, _ = init_positions_l1(cams)
    b = g.edges[0].translation
    assert np.allclose(c[0] - c[1], b, atol=1e-6)
    assert abs(np.linalg.norm(c[1] - c[0]) - 1.0) < 1e-6
    assert abs(s[0] - 1.0) < 1e-6
    assert np.array_equal(c[0], np.zeros(3))


def test_square_two_slot_noise_free():
    truth, g = square_scene()
    res = average_translations(g, rotations_of(truth), "trans_only_nonbilinear")
    assert res.reports[0]["stage"] == "init_positions_l1"
    cams = make_cameras(g, rotations_of(truth))
    c, t, _, _ = init_positions_l1(cams)
    uc, ut = cams.fields(c, t)
    from rigsfm.translation import TranslationResult

    assert median_position_error(truth, TranslationResult(uc, ut, {}, [])) < 1e-6
    assert np.array_equal(ut[0], np.zeros(3))


def _l1_lp(cams):
    """Independent LP for the L1 initialization: variables (c^g without anchor, t^r without ref, s, u)."""
    ei, ej, b = cams.edges()
    nu, ns, ne = len(cams.units), len(cams.slots), len(ei)
    nx = 3 * (nu - 1) + 3 * (ns - 1)
    M = np.zeros((3 * ne, nx + ne))
    for k, (i, j) in enumerate(zip(ei, ej)):
        rows = slice(3 * k, 3 * k + 3)
        # s b - (c_i - c_j + R_j^T t_j - R_i^T t_i)
        for cam, sign in ((i, -1.0), (j, 1.0)):
            u, s = cams.cam_unit[cam], cams.cam_slot[cam]
            if u != cams.anchor:
                M[rows, 3 * (u - 1):3 * u] += sign * np.eye(3)
            if s != cams.ref:
                M[rows, 3 * (nu - 1) + 3 * (s - 1):3 * (nu - 1) + 3 * s] += -sign * cams.R[cam].T
        M[rows, nx + k] = b[k]
    m = len(M)
    cost = np.concatenate([np.zeros(nx + ne), np.ones(m)])
    A_ub = np.block([[M, -np.eye(m)], [-M, -np.eye(m)]])
    bounds = [(None, None)] * nx + [(1, None)] * ne + [(0, None)] * m
    res = linprog(cost, A_ub=A_ub, b_ub=np.zeros(2 * m), bounds=bounds, method="highs")
    assert res.status == 0
    return res.fun, M, nx


def test_four_camera_lp_oracle():
    rng = np.random.default_rng(4)
    rig = [(np.eye(3), np.zeros(3)), (so3.exp(np.array([0.0, 0.3, 0.0])), np.array([0.7, 0.0, 0.1]))]
    unit_R = [so3.exp(np.array([0.0, 0.0, 0.2])), so3.exp(np.array([0.1, 0.0, -0.3]))]
    pairs = [((0, 0), (1, 0)), ((0, 1), (1, 1)), ((0, 0), (0, 1)), ((1, 0), (1, 1)), ((0, 0), (1, 1))]
    truth, g = build_scene(unit_R, [[0, 0, 0], [1.5, 0.4, -0.2]], rig, pairs, rng=rng, sigma_deg=8.0)
    cams = make_cameras(g, rotations_of(truth))
    opts = TranslationOptions()
    opts.admm.max_iter = 20000
    opts.admm.primal_tol = opts.admm.dual_tol = 1e-11
    c, t, s, rep = init_positions_l1(cams, opts)
    oracle, _, _ = _l1_lp(cams)
    assert abs(rep["objective_after"] - oracle) < 1e-6
    assert np.all(s >= 1.0)


def test_l1_convexity_spot_check():
    rng = np.random.default_rng(8)
    truth, g = square_scene(rng, sigma_deg=3.0, n_per_side=2)
    cams = make_cameras(g, rotations_of(truth))
    _, _, _, rep = init_positions_l1(cams)
    _, M, nx = _l1_lp(cams)
    ne = M.shape[1] - nx
    for _ in range(100):
        z = np.concatenate([rng.normal(scale=10, size=nx), 1.0 + rng.exponential(2.0, size=ne)])
        assert rep["objective_after"] <= np.abs(M @ z).sum() + 1e-9


def test_scale_does_not_collapse():
    rng = np.random.default_rng(0)
    truth, g = square_scene(rng, sigma_deg=20.0, n_per_side=2)
    res = average_translations(g, rotations_of(truth), "trans_only_nonbilinear")
    assert max(np.linalg.norm(v) for v in res.unit_position.values()) > 1e-9


def test_init_without_edges_fails():
    truth, g = build_scene([np.eye(3)] * 2, [[0, 0, 0], [1, 0, 0]], [(np.eye(3), np.zeros(3))], [])
    with pytest.raises(ValueError):
        init_positions_l1(make_cameras(g, rotations_of(truth)))


# -- angle refinement ---------------------------------------------------------------


def _truth_arrays(cams, truth):
    c = np.array([truth.unit_position[u] for u in cams.units])
    t = np.array([truth.rig.internal_translation[s] for s in cams.slots])
    return c - c[cams.anchor], t


def test_refine_stationary_at_truth():
    truth, g = square_scene()
    cams = make_cameras(g, rotations_of(truth))
    c0, t0 = _truth_arrays(cams, truth)
    c, t, rep = refine_positions_angle(cams, c0, t0)
    assert np.abs(c - c0).max() < 1e-10 and np.abs(t - t0).max() < 1e-10


def test_refine_from_perturbed_truth():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        truth, g = square_scene(rng, sigma_deg=0.1)
        cams = make_cameras(g, rotations_of(truth))
        c0, t0 = _truth_arrays(cams, truth)
        # about 1% of the 40 m trajectory
        c1 = c0 + rng.normal(scale=0.4, size=c0.shape)
        c1[cams.anchor] = 0
        uc, ut = cams.fields(c1, t0)
        from rigsfm.translation import TranslationResult

        before = median_position_error(truth, TranslationResult(uc, ut, {}, []))
        c, t, rep = refine_positions_angle(cams, c1, t0)
        assert rep["objective_after"] < rep["objective_before"]
        after = median_position_error(truth, TranslationResult(*cams.fields(c, t), {}, []))
        assert after <= before


def test_refine_flipped_outlier_edge():
    rng = np.random.default_rng(3)
    truth, g = square_scene(rng, sigma_deg=1.0, n_per_side=2)
    edges = list(g.edges)
    assert len(edges) >= 30
    edges = edges[:30]
    clean = ViewGraph(g.images, tuple(edges))
    bad = list(edges)
    e = bad[7]
    bad[7] = RelativePoseEdge(e.i, e.j, e.quaternion, -e.translation, e.num_inliers)
    dirty = ViewGraph(g.images, tuple(bad))
    rots = rotations_of(truth)
    base = median_position_error(truth, average_translations(clean, rots, "trans_only_nonbilinear"))
    hit = median_position_error(truth, average_translations(dirty, rots, "trans_only_nonbilinear"))
    assert hit <= 2 * base


def test_refine_rejects_nonfinite():
    truth, g = square_scene()
    cams = make_cameras(g, rotations_of(truth))
    c0, t0 = _truth_arrays(cams, truth)
    c0[1, 0] = np.nan
    with pytest.raises(ValueError):
        refine_positions_angle(cams, c0, t0)


# -- triangulation -----------------------------------------------------------------


def _ray_scene(centers, point, rng=None, sigma_deg=0.0, outlier=None):
    """One-slot units at ``centers`` with identity rotations, all observing ``point``."""
    n = len(centers)
    images = {k: ImageNode(k, k, 0) for k in range(n)}
    obs = []
    for k, c in enumerate(centers):
        b = point - c
        b = perturb_direction(rng, b / np.linalg.norm(b), sigma_deg)
        if outlier is not None and k == outlier:
            b = perturb_direction(rng, b, 30.0)
        obs.append(TrackObservation(k, bearing=b))
    g = ViewGraph(images, (), (Track(0, tuple(obs)),))
    cams = make_cameras(g, {k: np.eye(3) for k in range(n)})
    return cams, np.array(centers, float), np.zeros((1, 3))


def test_triangulate_exact_intersection():
    p = np.array([1.0, 2.0, 8.0])
    cams, c, t = _ray_scene([[0, 0, 0], [2, 0, 0], [0, 1.5, 0.5]], p)
    P, tracks, rep = triangulate_l1(cams, c, t, make_tracks(cams))
    assert np.abs(P[0] - p).max() < 1e-9


def _l2_point(centers, dirs):
    A = sum(np.eye(3) - np.outer(d, d) for d in dirs)
    b = sum((np.eye(3) - np.outer(d, d)) @ c for c, d in zip(centers, dirs))
    return np.linalg.solve(A, b)


def _l1_cost(P, c, g):
    return np.abs(np.cross(g[None], (P[:, None] - c[None]))).sum(axis=(1, 2))


def test_triangulate_with_outlier_ray():
    # a single instance can land either way, so compare medians over seeds
    l1_err, l2_err = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        p = np.array([0.5, -0.5, 10.0])
        q = np.linspace(0, 2 * np.pi, 6, endpoint=False)
        centers = np.c_[6 * np.cos(q), 6 * np.sin(q), rng.uniform(0, 2, 6)]
        cams, c, t = _ray_scene(centers, p, rng, 0.3, outlier=5)
        P, tracks, _ = triangulate_l1(cams, c, t, make_tracks(cams))
        l2 = _l2_point(c[:5], tracks.g[:5])
        l1_err.append(np.linalg.norm(P[0] - p))
        l2_err.append(np.linalg.norm(l2 - p))
        if seed < 5:
            # grid oracle: nothing near the truth has a lower L1 cost
            ax = np.linspace(-0.5, 0.5, 41)
            grid = p + np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
            assert _l1_cost(P, c, tracks.g)[0] <= _l1_cost(grid, c, tracks.g).min() + 1e-9
    assert np.median(l1_err) <= 2 * np.median(l2_err)


def test_triangulate_drops_parallel_rays():
    cams, c, t = _ray_scene([[0, 0, 0], [0.001, 0, 0]], np.array([0.0, 0.0, 1e4]))
    P, tracks, rep = triangulate_l1(cams, c, t, make_tracks(cams))
    assert len(P) == 0 and rep["dropped_parallel"] == 1


def test_triangulate_drops_points_behind():
    images = {0: ImageNode(0, 0, 0), 1: ImageNode(1, 1, 0)}
    # the two rays point away from each other: the best "intersection" is behind both cameras
    obs = (TrackObservation(0, bearing=np.array([-0.6, 0.0, 0.8])), TrackObservation(1, bearing=np.array([0.6, 0.0, 0.8])))
    g = ViewGraph(images, (), (Track(0, obs),))
    cams = make_cameras(g, {0: np.eye(3), 1: np.eye(3)})
    P, tracks, rep = triangulate_l1(cams, np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.zeros((1, 3)), make_tracks(cams))
    assert len(P) == 0 and rep["dropped_behind"] == 1


# -- joint refinement and variants --------------------------------------------------


def _points_scene(rng=None, sigma_deg=0.0, bearing_sigma_deg=0.0, n_points=40):
    rng = rng or np.random.default_rng(0)
    pts = rng.uniform([-5, -5, 3], [15, 15, 8], size=(n_points, 3))
    return square_scene(rng, sigma_deg, n_per_side=2, points=pts, bearing_sigma_deg=bearing_sigma_deg)


def test_joint_refine_stationary():
    truth, g = _points_scene()
    cams = make_cameras(g, rotations_of(truth))
    tracks = make_tracks(cams)
    c0, t0 = _truth_arrays(cams, truth)
    P0 = np.array([truth.points[k] for k in tracks.point_ids]) - truth.unit_position[cams.units[cams.anchor]]
    c, t, P, rep = joint_refine(cams, c0, t0, P0, tracks)
    assert max(np.abs(c - c0).max(), np.abs(t - t0).max(), np.abs(P - P0).max()) < 1e-10


def test_all_variants_agree_with_perfect_init():
    truth, g = _points_scene()
    rots = rotations_of(truth)
    init = (dict(truth.unit_position), dict(truth.rig.internal_translation), dict(truth.points))
    for v in VARIANTS:
        res = average_translations(g, rots, v, init=init)
        assert median_position_error(truth, res) < 1e-6, v


def test_hybrid_noise_free_exact():
    truth, g = _points_scene()
    res = average_translations(g, rotations_of(truth))
    assert median_position_error(truth, res) < 1e-6
    assert [r["stage"] for r in res.reports] == ["init_positions_l1", "refine_positions_angle", "triangulate_l1",
                                                 "joint_refine_angle"]


def test_outlier_bearings_median_error():
    cfg = dict(num_units=12, slots=default_rig(2), num_points=400, extent=40.0, pixel_noise_sigma=1.0)
    truth, g = generate_scene(SceneConfig(**cfg, seed=1))
    base = median_position_error(truth, average_translations(g, rotations_of(truth)))
    truth, g = generate_scene(SceneConfig(**cfg, bearing_outlier_fraction=0.1, seed=1))
    hit = median_position_error(truth, average_translations(g, rotations_of(truth)))
    assert hit < 2 * base


def test_reports_are_machine_readable():
    truth, g = _points_scene()
    res = average_translations(g, rotations_of(truth))
    for rep in res.reports:
        assert "stage" in rep and "objective_after" in rep
    assert res.reports[2]["dropped_parallel"] == 0


# -- objective properties ---------------------------------------------------------


def _problem(cams, c, t, P, tracks, bilinear, which):
    edges = cams.edges() if which in ("edges", "both") else None
    trk = tracks if which in ("tracks", "both") else None
    return _build_problem(cams, c, t, edges=edges, tracks=trk, points=P if trk is not None else None,
                          bilinear=bilinear, kernel=None)


@pytest.mark.parametrize("bilinear", [False, True])
def test_jacobians_random_states(bilinear):
    rng = np.random.default_rng(11)
    truth, g = _points_scene(rng)
    cams = make_cameras(g, rotations_of(truth))
    tracks = make_tracks(cams)
    worst = 0.0
    for _ in range(100):
        c = rng.normal(scale=10, size=(len(cams.units), 3))
        t = rng.normal(size=(len(cams.slots), 3))
        P = rng.normal(scale=10, size=(tracks.num_points, 3))
        prob = _problem(cams, c, t, P, tracks, bilinear, "both")
        worst = max(worst, max(check_jacobian(prob).values()))
    assert worst < 1e-4


def test_non_bilinear_costs_gauge_invariant():
    rng = np.random.default_rng(2)
    truth, g = _points_scene(rng, sigma_deg=2.0, bearing_sigma_deg=1.0)
    cams = make_cameras(g, rotations_of(truth))
    tracks = make_tracks(cams)
    c, t = _truth_arrays(cams, truth)
    c = c + rng.normal(scale=0.5, size=c.shape)
    P = np.array([truth.points[k] for k in tracks.point_ids]) + rng.normal(scale=0.5, size=(tracks.num_points, 3))
    for which in ("edges", "tracks"):
        base = _problem(cams, c, t, P, tracks, False, which)
        ref = base.cost(base.values())
        for alpha, tau in ((2.5, np.array([3.0, -1.0, 7.0])), (0.3, np.array([-20.0, 5.0, 0.5]))):
            moved = _problem(cams, alpha * c + tau, alpha * t, alpha * P + tau, tracks, False, which)
            assert abs(moved.cost(moved.values()) - ref) <= 1e-12 * max(ref, 1.0)


def test_zero_baseline_residual_is_zero():
    from rigsfm.translation import _edge_residual

    R = np.eye(3)[None]
    fn = _edge_residual(np.array([[1.0, 0, 0]]), R, R, bilinear=False)
    z = np.zeros((1, 3))
    r, J = fn(z, z, z, z)
    assert np.array_equal(r, np.array([[1.0, 0, 0]]))
    assert all(np.all(j == 0) for j in J)
