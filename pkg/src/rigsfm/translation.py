"""Translation averaging for rigs with known rotations.

Unknowns are unit positions ``c^g`` and internal translations ``t^r``; the
camera-center difference of an edge is linear in them::

    C_ij = c^g_i - c^g_j + R_j.T t^r_j - R_i.T t^r_i

The default (hybrid) schedule runs four stages: an L1 distance objective
with baseline scales ``s_ij >= 1`` for initialization, a unit-direction
refinement on relative translations, L1 cross-product triangulation of the
tracks, and a joint unit-direction refinement of cameras and points against
the feature bearings. Bilinear counterparts (normalized by free inverse
distances instead of the norm) are kept for comparison.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import so3
from .scene import ViewGraph
from .solvers import (
    AdmmL1Problem,
    AdmmOptions,
    LeastSquaresProblem,
    LMOptions,
    RobustKernel,
    SingularSystemError,
    SolverError,
    admm_l1,
    levenberg_marquardt,
)

log = logging.getLogger(__name__)

VARIANTS = (
    "trans_only_bilinear",
    "trans_only_nonbilinear",
    "tracks_only_bilinear",
    "tracks_only_nonbilinear",
    "hybrid_bilinear",
    "hybrid_nonbilinear",
)

_TINY = 1e-9


@dataclass
class TranslationOptions:
    # chordal units, about 1.7 degrees; at 0.1 a tenth of outlier bearings already
    # outweighs the inliers in the joint refinement
    cauchy_scale: float = 0.03
    admm: AdmmOptions = field(default_factory=AdmmOptions)
    lm: LMOptions = field(default_factory=lambda: LMOptions(max_iter=100, fn_tol=1e-9))
    max_track_length: int | None = 50
    min_triangulation_angle_deg: float = 1.0
    seed: int = 0


@dataclass
class TranslationResult:
    unit_position: dict
    internal_translation: dict
    points: dict
    reports: list
    scales: dict = field(default_factory=dict)


class _Cameras:
    """Index bookkeeping shared by every stage."""

    def __init__(self, graph: ViewGraph, rotations: dict):
        self.graph = graph
        ids = [i for i in graph.image_ids if i in rotations]
        self.ids = np.array(ids, dtype=np.int64)
        self.row = {i: k for k, i in enumerate(ids)}
        self.units = sorted({graph.images[i].unit_id for i in ids})
        self.slots = sorted({graph.images[i].slot_id for i in ids})
        self.unit_ix = {u: k for k, u in enumerate(self.units)}
        self.slot_ix = {s: k for k, s in enumerate(self.slots)}
        self.cam_unit = np.array([self.unit_ix[graph.images[i].unit_id] for i in ids], dtype=np.int64)
        self.cam_slot = np.array([self.slot_ix[graph.images[i].slot_id] for i in ids], dtype=np.int64)
        self.R = np.array([rotations[i] for i in ids]).reshape(-1, 3, 3)
        self.anchor = 0
        self.ref = 0

    def centers(self, c, t):
        return c[self.cam_unit] - np.einsum("nji,nj->ni", self.R, t[self.cam_slot])

    def edges(self):
        ei, ej, b = [], [], []
        for e in self.graph.edges:
            if e.i in self.row and e.j in self.row:
                ei.append(self.row[e.i])
                ej.append(self.row[e.j])
                b.append(self.R[self.row[e.j]].T @ e.translation)
        b = np.array(b).reshape(-1, 3)
        n = np.linalg.norm(b, axis=1, keepdims=True)
        return np.array(ei, dtype=np.int64), np.array(ej, dtype=np.int64), b / np.where(n > 0, n, 1.0)

    def fields(self, c, t):
        return (
            {u: c[k].copy() for k, u in enumerate(self.units)},
            {s: t[k].copy() for k, s in enumerate(self.slots)},
        )


class _Tracks:
    """Flattened camera-to-point observations with world-frame bearings."""

    def __init__(self, cams: _Cameras, max_length: int | None):
        graph = cams.graph
        pid, cam, g = [], [], []
        self.point_ids = []
        self.excluded = 0
        for tr in graph.tracks:
            obs = [o for o in tr.observations if o.image_id in cams.row]
            if len(obs) < 2 or len({graph.images[o.image_id].unit_id for o in obs}) < 2:
                self.excluded += 1
                continue
            if max_length is not None and len(obs) > max_length:
                keep = np.unique(np.round(np.linspace(0, len(obs) - 1, max_length)).astype(int))
                obs = [obs[k] for k in keep]
            k = len(self.point_ids)
            self.point_ids.append(tr.point_id)
            for o in obs:
                r = cams.row[o.image_id]
                pid.append(k)
                cam.append(r)
                g.append(cams.R[r].T @ graph.bearing(o))
        self.point = np.array(pid, dtype=np.int64)
        self.cam = np.array(cam, dtype=np.int64)
        self.g = np.array(g).reshape(-1, 3)

    @property
    def num_points(self):
        return len(self.point_ids)

    def subset(self, keep_points: np.ndarray) -> "_Tracks":
        out = object.__new__(_Tracks)
        remap = np.full(self.num_points, -1)
        remap[keep_points] = np.arange(len(keep_points))
        m = remap[self.point] >= 0
        out.point_ids = [self.point_ids[k] for k in keep_points]
        out.point = remap[self.point[m]]
        out.cam = self.cam[m]
        out.g = self.g[m]
        out.excluded = self.excluded
        return out


# -- residuals -----------------------------------------------------------------


def _unit_direction(v, jac):
    """``v / |v|`` and its Jacobian, both zero where ``|v| < 1e-9``."""
    n = np.linalg.norm(v, axis=1)
    small = n < _TINY
    safe = np.where(small, 1.0, n)
    u = v / safe[:, None]
    u[small] = 0.0
    if not jac:
        return u, None
    J = (np.eye(3)[None] - u[:, :, None] * u[:, None, :]) / safe[:, None, None]
    J[small] = 0.0
    return u, J


def _edge_residual(b, Ri, Rj, bilinear):
    """Residual over ``(c_i, c_j, t_i, t_j[, d])`` for camera-to-camera terms."""
    RiT = np.transpose(Ri, (0, 2, 1))
    RjT = np.transpose(Rj, (0, 2, 1))

    def fn(ci, cj, ti, tj, *rest, jac=True):
        C = ci - cj + np.einsum("nij,nj->ni", RjT, tj) - np.einsum("nij,nj->ni", RiT, ti)
        if bilinear:
            d = rest[0]
            r = b - d * C
            if not jac:
                return r, None
            JC = -d[:, :, None] * np.eye(3)[None]
            extra = [-C[:, :, None]]
        else:
            u, JC = _unit_direction(C, jac)
            r = b - u
            if not jac:
                return r, None
            JC = -JC
            extra = []
        return r, [JC, -JC, -JC @ RiT, JC @ RjT] + extra

    return fn


def _point_residual(g, Ri, bilinear):
    """Residual over ``(p, c, t[, d])`` for camera-to-point terms."""
    RiT = np.transpose(Ri, (0, 2, 1))

    def fn(p, c, t, *rest, jac=True):
        V = p - c + np.einsum("nij,nj->ni", RiT, t)
        if bilinear:
            d = rest[0]
            r = g - d * V
            if not jac:
                return r, None
            JV = -d[:, :, None] * np.eye(3)[None]
            extra = [-V[:, :, None]]
        else:
            u, JV = _unit_direction(V, jac)
            r = g - u
            if not jac:
                return r, None
            JV = -JV
            extra = []
        return r, [JV, -JV, JV @ RiT] + extra

    return fn


def _inverse_distance(v):
    return np.clip(1.0 / np.maximum(np.linalg.norm(v, axis=1), 1e-300), 1e-9, 1e9)


def _build_problem(cams, c, t, *, edges=None, tracks=None, points=None, bilinear=False, kernel=None):
    prob = LeastSquaresProblem(eliminate=("d_obs", "d_edge", "p"))
    fixed_c = np.zeros(len(c), dtype=bool)
    fixed_c[cams.anchor] = True
    fixed_t = np.zeros(len(t), dtype=bool)
    fixed_t[cams.ref] = True
    prob.add_parameters("c", c, constant=fixed_c)
    prob.add_parameters("t", t, constant=fixed_t)
    if edges is not None:
        ei, ej, b = edges
        blocks = [("c", cams.cam_unit[ei]), ("c", cams.cam_unit[ej]), ("t", cams.cam_slot[ei]), ("t", cams.cam_slot[ej])]
        if bilinear:
            C = cams.centers(c, t)
            prob.add_parameters("d_edge", _inverse_distance(C[ei] - C[ej]), lower=0.0)
            blocks.append(("d_edge", np.arange(len(ei))))
        prob.add_residuals(_edge_residual(b, cams.R[ei], cams.R[ej], bilinear), blocks, kernel, "camera_camera")
    if tracks is not None:
        prob.add_parameters("p", points)
        blocks = [("p", tracks.point), ("c", cams.cam_unit[tracks.cam]), ("t", cams.cam_slot[tracks.cam])]
        if bilinear:
            ctr = cams.centers(c, t)
            prob.add_parameters("d_obs", _inverse_distance(points[tracks.point] - ctr[tracks.cam]), lower=0.0)
            blocks.append(("d_obs", np.arange(len(tracks.point))))
        prob.add_residuals(_point_residual(tracks.g, cams.R[tracks.cam], bilinear), blocks, kernel, "camera_point")
    return prob


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise ValueError("initial values must be finite")


def _reanchor(cams, c, points=None):
    shift = c[cams.anchor].copy()
    c = c - shift
    if points is not None:
        points = points - shift
    return c, points


def _lm_report(stage, res):
    return {
        "stage": stage,
        "objective_before": res.initial_cost,
        "objective_after": res.final_cost,
        "iterations": res.iterations,
        "status": res.status,
    }


# -- stages ------------------------------------------------------------------


def init_positions_l1(cams: _Cameras, options: TranslationOptions | None = None):
    """Minimize ``sum |s_ij b_ij - C_ij|_1`` subject to ``s_ij >= 1``.

    Returns ``(c, t, scales, report)``; anchor unit and reference slot are
    eliminated (held at zero).
    """
    opts = options or TranslationOptions()
    ei, ej, b = cams.edges()
    if len(ei) == 0:
        raise ValueError("no relative translations available for initialization")
    nu, ns, ne = len(cams.units), len(cams.slots), len(ei)
    ucol = np.full(nu, -1)
    ucol[np.arange(nu) != cams.anchor] = np.arange(nu - 1)
    scol = np.full(ns, -1)
    scol[np.arange(ns) != cams.ref] = 3 * (nu - 1) + 3 * np.arange(ns - 1)
    ucol = np.where(ucol >= 0, 3 * ucol, -1)

    rows, cols, vals = [], [], []
    base = 3 * np.arange(ne)

    def put(col, block):
        # block: (ne, 3, 3) written at rows base.., columns col..
        keep = col >= 0
        for a in range(3):
            for k in range(3):
                rows.append(base[keep] + a)
                cols.append(col[keep] + k)
                vals.append(block[keep, a, k])

    eye = np.broadcast_to(np.eye(3), (ne, 3, 3))
    RiT = np.transpose(cams.R[ei], (0, 2, 1))
    RjT = np.transpose(cams.R[ej], (0, 2, 1))
    # A x = -C_ij
    put(ucol[cams.cam_unit[ei]], -eye)
    put(ucol[cams.cam_unit[ej]], eye)
    put(scol[cams.cam_slot[ei]], RiT)
    put(scol[cams.cam_slot[ej]], -RjT)
    nx = 3 * (nu - 1) + 3 * (ns - 1)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * ne, nx))
    B = sp.csr_matrix((b.ravel(), (np.arange(3 * ne), np.repeat(np.arange(ne), 3))), shape=(3 * ne, ne))
    names = [f"unit {u}" for k, u in enumerate(cams.units) if k != cams.anchor for _ in range(3)]
    names += [f"slot {s}" for k, s in enumerate(cams.slots) if k != cams.ref for _ in range(3)]
    prob = AdmmL1Problem(A, np.zeros(3 * ne), B, variable_names=names)
    free = []
    try:
        res = admm_l1(prob, opts.admm)
    except SingularSystemError as exc:
        # e.g. a rig slot with no edge to any other slot, on a straight path:
        # its offset cancels from every edge. Leave such directions at zero
        # for the track stages (or nobody) to fix.
        free = sorted(set(exc.variables))
        log.warning("relative translations do not fix all positions (weak pivots at %s); "
                    "holding the free directions at zero", ", ".join(free[:10]))
        res = admm_l1(prob, opts.admm, allow_singular=True)

    c = np.zeros((nu, 3))
    t = np.zeros((ns, 3))
    c[ucol >= 0] = res.solution[: 3 * (nu - 1)].reshape(-1, 3)
    t[scol >= 0] = res.solution[3 * (nu - 1) :].reshape(-1, 3)
    report = {
        "stage": "init_positions_l1",
        "objective_before": float(np.abs(B @ np.ones(ne)).sum()),
        "objective_after": res.objective,
        "iterations": res.iterations,
        "converged": res.converged,
        "polished": res.polished,
        "undetermined": free,
    }
    if not (res.converged or res.polished):
        log.warning("L1 position initialization stopped before convergence (%d iterations)", res.iterations)
    return c, t, res.scales, report


def refine_positions_angle(cams: _Cameras, c, t, options: TranslationOptions | None = None, bilinear: bool = False):
    """Robust unit-direction (or bilinear) refinement on relative translations only."""
    opts = options or TranslationOptions()
    _check_finite(c, t)
    edges = cams.edges()
    prob = _build_problem(cams, c, t, edges=edges, bilinear=bilinear, kernel=RobustKernel("cauchy", opts.cauchy_scale))
    res = levenberg_marquardt(prob, opts.lm)
    c, _ = _reanchor(cams, res.values["c"])
    return c, res.values["t"].copy(), _lm_report("refine_positions_" + ("bilinear" if bilinear else "angle"), res)


def _ray_angles_ok(tracks: _Tracks, min_angle_rad: float) -> np.ndarray:
    """Per point: is the widest pair of rays at least ``min_angle_rad`` apart."""
    order = np.argsort(tracks.point, kind="stable")
    starts = np.searchsorted(tracks.point[order], np.arange(tracks.num_points))
    ends = np.append(starts[1:], len(order))
    ok = np.zeros(tracks.num_points, dtype=bool)
    cos_lim = np.cos(min_angle_rad)
    for k in range(tracks.num_points):
        G = tracks.g[order[starts[k] : ends[k]]]
        ok[k] = (G @ G.T).min() <= cos_lim
    return ok


def _midpoint_seed(cams, centers, tracks):
    """Two-view midpoint from the first observation and the first ray not parallel to it."""
    order = np.argsort(tracks.point, kind="stable")
    starts = np.searchsorted(tracks.point[order], np.arange(tracks.num_points))
    ends = np.append(starts[1:], len(order))
    out = np.zeros((tracks.num_points, 3))
    for k in range(tracks.num_points):
        rows = order[starts[k] : ends[k]]
        g = tracks.g[rows]
        c = centers[tracks.cam[rows]]
        sin = np.linalg.norm(np.cross(g[0], g[1:]), axis=1)
        m = 1 + (int(np.argmax(sin > 1e-3)) if np.any(sin > 1e-3) else int(np.argmax(sin)))
        a, b = g[0], g[m]
        w = c[0] - c[m]
        ab = a @ b
        den = 1.0 - ab * ab
        if den < 1e-12:
            out[k] = c[0] + a
            continue
        s = (ab * (b @ w) - (a @ w)) / den
        u = ((b @ w) - ab * (a @ w)) / den
        out[k] = 0.5 * (c[0] + s * a + c[m] + u * b)
    return out


def _polish_points(P, K, d, tracks, n, rel_tol=1e-6):
    """Snap each point onto the rows its L1 solution makes (nearly) zero.

    ADMM only reaches an L1 vertex to its tolerance. Solving the active rows
    exactly in the least-squares sense recovers it to machine precision; the
    result is kept only where it does not raise the L1 cost of that point.
    """
    r = np.einsum("nij,nj->ni", K, P[tracks.point]) - d
    tol = rel_tol * max(1.0, float(np.abs(d).max(initial=0.0)))
    W = (np.abs(r) <= tol).astype(float)
    KW = K * W[:, :, None]
    N = np.zeros((n, 3, 3))
    b = np.zeros((n, 3))
    np.add.at(N, tracks.point, np.einsum("nki,nkj->nij", KW, K))
    np.add.at(b, tracks.point, np.einsum("nki,nk->ni", KW, d))
    good = np.linalg.cond(N) < 1e8
    Q = P.copy()
    Q[good] = np.linalg.solve(N[good], b[good][:, :, None])[:, :, 0]
    cost = lambda X: np.bincount(tracks.point, np.abs(np.einsum("nij,nj->ni", K, X[tracks.point]) - d).sum(1), n)
    better = good & (cost(Q) <= cost(P))
    P[better] = Q[better]
    return P


def triangulate_l1(cams: _Cameras, c, t, tracks: _Tracks, options: TranslationOptions | None = None):
    """Minimize ``sum |g_ik x (p_k - c_i)|_1`` for all points at once.

    The problem is block diagonal, so one batched ADMM solve is the same as
    independent per-point solves. Returns ``(points, kept_tracks, report)``.
    """
    opts = options or TranslationOptions()
    n = tracks.num_points
    report = {"stage": "triangulate_l1", "input_tracks": n, "excluded_tracks": tracks.excluded}
    if n == 0:
        report.update(dropped_parallel=0, dropped_behind=0, objective_after=0.0, iterations=0, converged=True)
        return np.zeros((0, 3)), tracks, report
    centers = cams.centers(c, t)
    ok_angle = _ray_angles_ok(tracks, np.deg2rad(opts.min_triangulation_angle_deg))
    seed = _midpoint_seed(cams, centers, tracks)

    m = len(tracks.point)
    K = so3.hat(tracks.g)
    rows = np.repeat(3 * np.arange(m), 9).reshape(m, 3, 3) + np.arange(3)[None, :, None]
    cols = np.repeat(3 * tracks.point, 9).reshape(m, 3, 3) + np.arange(3)[None, None, :]
    A = sp.csr_matrix((K.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * m, 3 * n))
    d = np.einsum("nij,nj->ni", K, centers[tracks.cam]).ravel()
    res = admm_l1(AdmmL1Problem(A, d, x0=seed.ravel()), opts.admm, allow_singular=True, polish=False)
    P = _polish_points(res.solution.reshape(n, 3), K, d.reshape(m, 3), tracks, n)

    depth = np.einsum("ni,ni->n", P[tracks.point] - centers[tracks.cam], tracks.g)
    behind = np.bincount(tracks.point, weights=(depth <= 0).astype(float), minlength=n)
    total = np.bincount(tracks.point, minlength=n)
    ok_depth = behind <= 0.5 * total
    keep = np.flatnonzero(ok_angle & ok_depth & np.all(np.isfinite(P), axis=1))
    report.update(
        dropped_parallel=int((~ok_angle).sum()),
        dropped_behind=int((ok_angle & ~ok_depth).sum()),
        objective_after=res.objective,
        iterations=res.iterations,
        converged=res.converged,
    )
    return P[keep], tracks.subset(keep), report


def joint_refine(cams: _Cameras, c, t, points, tracks: _Tracks, options: TranslationOptions | None = None,
                 bilinear: bool = False, with_edges: bool = False):
    """Joint refinement of unit positions, internal translations and points."""
    opts = options or TranslationOptions()
    _check_finite(c, t, points)
    edges = cams.edges() if with_edges else None
    prob = _build_problem(cams, c, t, edges=edges, tracks=tracks, points=points, bilinear=bilinear,
                          kernel=RobustKernel("cauchy", opts.cauchy_scale))
    res = levenberg_marquardt(prob, opts.lm)
    c, P = _reanchor(cams, res.values["c"], res.values["p"])
    return c, res.values["t"].copy(), P, _lm_report("joint_refine_" + ("bilinear" if bilinear else "angle"), res)


# -- schedules ---------------------------------------------------------------


def _random_init(cams, tracks, seed):
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.0, 1.0, size=(len(cams.units), 3))
    c[cams.anchor] = 0.0
    t = np.zeros((len(cams.slots), 3))
    P = rng.uniform(0.0, 1.0, size=(tracks.num_points, 3))
    return c, t, P


def average_translations(graph: ViewGraph, rotations: dict, variant: str = "hybrid_nonbilinear",
                         options: TranslationOptions | None = None, init=None) -> TranslationResult:
    """Run one translation schedule.

    Args:
        rotations: global camera rotation per image id.
        variant: one of ``VARIANTS``.
        init: optional ``(unit_position, internal_translation)`` dicts that
            replace the L1 (or random) initialization. A third dict of
            points replaces the random points of the track-only variants.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    opts = options or TranslationOptions()
    cams = _Cameras(graph, rotations)
    bilinear = variant.endswith("_bilinear")
    reports = []
    scales = {}
    P = None
    tracks = None

    if variant.startswith("tracks_only"):
        tracks = _Tracks(cams, opts.max_track_length)
        if tracks.num_points == 0:
            raise ValueError("no usable feature tracks")
        c, t, P = _random_init(cams, tracks, opts.seed)
        if init is not None:
            c, t = _init_arrays(cams, init)
            if len(init) > 2:
                P = np.array([init[2][pid] for pid in tracks.point_ids], dtype=float).reshape(-1, 3) - init[0][cams.units[cams.anchor]]
        c, t, P, rep = joint_refine(cams, c, t, P, tracks, opts, bilinear=bilinear)
        reports.append(rep)
    else:
        if init is None:
            c, t, s, rep = init_positions_l1(cams, opts)
            reports.append(rep)
            ei, ej, _ = cams.edges()
            scales = {(int(cams.ids[a]), int(cams.ids[b])): float(v) for a, b, v in zip(ei, ej, s)}
        else:
            c, t = _init_arrays(cams, init)
        c, t, rep = refine_positions_angle(cams, c, t, opts, bilinear=bilinear)
        reports.append(rep)
        if variant.startswith("hybrid"):
            tracks = _Tracks(cams, opts.max_track_length)
            P, tracks, rep = triangulate_l1(cams, c, t, tracks, opts)
            reports.append(rep)
            if tracks.num_points:
                c, t, P, rep = joint_refine(cams, c, t, P, tracks, opts, bilinear=bilinear)
                reports.append(rep)

    uc, ut = cams.fields(c, t)
    points = {} if P is None else {pid: P[k].copy() for k, pid in enumerate(tracks.point_ids)}
    return TranslationResult(uc, ut, points, reports, scales)


def _init_arrays(cams, init):
    uc, ut = init[:2]
    c = np.array([np.asarray(uc[u], dtype=float) for u in cams.units])
    t = np.array([np.asarray(ut.get(s, np.zeros(3)), dtype=float) for s in cams.slots])
    return c - c[cams.anchor], t


def make_cameras(graph: ViewGraph, rotations: dict) -> _Cameras:
    return _Cameras(graph, rotations)


def make_tracks(cams: _Cameras, max_length: int | None = 50) -> _Tracks:
    return _Tracks(cams, max_length)


__all__ = [
    "VARIANTS",
    "TranslationOptions",
    "TranslationResult",
    "SolverError",
    "average_translations",
    "init_positions_l1",
    "refine_positions_angle",
    "triangulate_l1",
    "joint_refine",
    "make_cameras",
    "make_tracks",
]
