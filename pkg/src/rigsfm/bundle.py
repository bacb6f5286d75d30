"""Bundle adjustment over unit poses, rig calibration and points.

A point ``p`` seen by the camera in slot ``s`` of unit ``u`` projects as::

    X = R^r_s R^g_u (p - c^g_u) + t^r_s,    x = f X[:2] / X[2] + (cx, cy)

The default schedule is two rounds: rotations held fixed, an observation
filter, then everything free except the gauge (anchor unit pose and
reference-slot pose).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import so3
from .scene import Intrinsics, ReconstructionState, ViewGraph
from .solvers import LeastSquaresProblem, LMOptions, RobustKernel, levenberg_marquardt

log = logging.getLogger(__name__)

_MIN_DEPTH = 1e-9
STAGES = ("rotations_fixed", "full")


@dataclass
class Observations:
    """Flat arrays of (image, point, pixel) triples."""

    image_ids: np.ndarray
    point_ids: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        if not len(self.image_ids) == len(self.point_ids) == len(self.pixels):
            raise ValueError("observation arrays differ in length")

    def __len__(self):
        return len(self.image_ids)

    def select(self, mask) -> "Observations":
        return Observations(self.image_ids[mask], self.point_ids[mask], self.pixels[mask])


def observations_from_graph(graph: ViewGraph, state: ReconstructionState) -> Observations:
    """Observations of reconstructed points in reconstructed images.

    Bearings are turned into ideal pixels through the image's intrinsics;
    bearings pointing away from the image plane are skipped.
    """
    img, pid, px = [], [], []
    for tr in graph.tracks:
        if tr.point_id not in state.points:
            continue
        for o in tr.observations:
            node = state.images.get(o.image_id)
            if node is None or node.unit_id not in state.unit_position:
                continue
            if o.pixel is not None and o.bearing is None:
                x = np.asarray(o.pixel, dtype=float)
            else:
                b = np.asarray(o.bearing, dtype=float)
                if b[2] <= _MIN_DEPTH:
                    continue
                x = state.intrinsics[node.intrinsics_id].project(b[None])[0]
            img.append(o.image_id)
            pid.append(tr.point_id)
            px.append(x)
    return Observations(img, pid, np.array(px).reshape(-1, 2))


def reproject(intr: Intrinsics, rig_rot, rig_trans, unit_rot, unit_pos, point):
    """Pixel of ``point``, or None when it is not in front of the camera."""
    X = rig_rot @ (unit_rot @ (np.asarray(point, dtype=float) - unit_pos)) + rig_trans
    if X[2] <= _MIN_DEPTH:
        return None
    return intr.focal * X[:2] / X[2] + np.array([intr.cx, intr.cy])


@dataclass
class BaOptions:
    stage: str = "full"
    refine_intrinsics: bool = False
    huber_scale: float = 2.0
    max_iterations: int = 50
    max_px_filter: float = 8.0
    lm: LMOptions | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if not self.huber_scale > 0:
            raise ValueError("huber_scale must be positive")

    def lm_options(self) -> LMOptions:
        return self.lm or LMOptions(max_iter=self.max_iterations, fn_tol=1e-10)


class _Index:
    def __init__(self, state: ReconstructionState, obs: Observations):
        self.units = sorted(state.unit_position)
        self.slots = sorted(state.rig.internal_rotation)
        self.intr = sorted(state.intrinsics)
        self.points = np.array(sorted(state.points), dtype=np.int64)
        u_ix = {u: k for k, u in enumerate(self.units)}
        s_ix = {s: k for k, s in enumerate(self.slots)}
        f_ix = {k: n for n, k in enumerate(self.intr)}
        nodes = [state.images[i] for i in obs.image_ids]
        self.unit = np.array([u_ix[n.unit_id] for n in nodes], dtype=np.int64)
        self.slot = np.array([s_ix[n.slot_id] for n in nodes], dtype=np.int64)
        self.cam_intr = np.array([f_ix[n.intrinsics_id] for n in nodes], dtype=np.int64)
        self.point = np.searchsorted(self.points, obs.point_ids)
        intr = [state.intrinsics[k] for k in self.intr]
        self.focal = np.array([i.focal for i in intr])
        self.center = np.array([[i.cx, i.cy] for i in intr]).reshape(-1, 2)

    def arrays(self, state):
        return (
            np.array([state.unit_rotation[u] for u in self.units]).reshape(-1, 3, 3),
            np.array([state.unit_position[u] for u in self.units]).reshape(-1, 3),
            np.array([state.rig.internal_rotation[s] for s in self.slots]).reshape(-1, 3, 3),
            np.array([state.rig.internal_translation[s] for s in self.slots]).reshape(-1, 3),
            np.array([state.points[p] for p in self.points]).reshape(-1, 3),
        )


def _camera_points(Rg, c, Rr, t, p):
    Y = np.einsum("nij,nj->ni", Rg, p - c)
    RY = np.einsum("nij,nj->ni", Rr, Y)
    return Y, RY, RY + t


def _projection_jacobian(X, f):
    z = X[:, 2]
    x, y = X[:, 0] / z, X[:, 1] / z
    J = np.zeros((len(X), 2, 3))
    J[:, 0, 0] = f / z
    J[:, 1, 1] = f / z
    J[:, 0, 2] = -f * x / z
    J[:, 1, 2] = -f * y / z
    return J


def _reprojection_residual(pixels, center, focal=None):
    """Residual over ``(R^g, c^g, R^r, t^r, p[, f])``; ``focal`` fixed when given."""

    def fn(Rg, c, Rr, t, p, *rest, jac=True):
        f = rest[0][:, 0] if focal is None else focal
        Y, RY, X = _camera_points(Rg, c, Rr, t, p)
        z = X[:, 2]
        uv = X[:, :2] / z[:, None]
        r = f[:, None] * uv + center - pixels
        if not jac:
            return r, None
        Jp = _projection_jacobian(X, f)
        M = Rr @ Rg
        J_Rg = -Jp @ Rr @ so3.hat(Y)
        J_c = -Jp @ M
        J_Rr = -Jp @ so3.hat(RY)
        J_t = Jp
        J_p = Jp @ M
        jacs = [J_Rg, J_c, J_Rr, J_t, J_p]
        if focal is None:
            jacs.append(uv[:, :, None])
        return r, jacs

    return fn


def _depths(index, arrays):
    Rg, c, Rr, t, p = arrays
    _, _, X = _camera_points(Rg[index.unit], c[index.unit], Rr[index.slot], t[index.slot], p[index.point])
    return X[:, 2]


def reprojection_errors(state: ReconstructionState, obs: Observations) -> tuple[np.ndarray, np.ndarray]:
    """Per-observation pixel error and an in-front flag."""
    if len(obs) == 0:
        return np.zeros(0), np.zeros(0, dtype=bool)
    index = _Index(state, obs)
    Rg, c, Rr, t, p = index.arrays(state)
    _, _, X = _camera_points(Rg[index.unit], c[index.unit], Rr[index.slot], t[index.slot], p[index.point])
    front = X[:, 2] > _MIN_DEPTH
    z = np.where(front, X[:, 2], 1.0)
    uv = index.focal[index.cam_intr][:, None] * X[:, :2] / z[:, None] + index.center[index.cam_intr]
    err = np.linalg.norm(uv - obs.pixels, axis=1)
    err[~front] = np.inf
    return err, front


def ba_cost(state: ReconstructionState, obs: Observations, huber_scale: float = 2.0) -> float:
    """Robust reprojection cost over in-front observations."""
    err, front = reprojection_errors(state, obs)
    return 0.5 * float(RobustKernel("huber", huber_scale).rho(err[front] ** 2).sum())


def multi_camera_ba(state: ReconstructionState, obs: Observations, options: BaOptions | None = None,
                    anchor_unit=None, reference_slot=None):
    """One bundle-adjustment round; returns ``(new_state, report)``.

    Raises:
        ValueError: when no observation is usable.
    """
    opts = options or BaOptions()
    if len(obs) == 0:
        raise ValueError("bundle adjustment needs at least one observation")
    index = _Index(state, obs)
    arrays = index.arrays(state)
    front = _depths(index, arrays) > _MIN_DEPTH
    if not np.any(front):
        raise ValueError("no observation lies in front of its camera")
    anchor = index.units.index(min(index.units) if anchor_unit is None else anchor_unit)
    ref = index.slots.index(min(index.slots) if reference_slot is None else reference_slot)

    Rg, c, Rr, t, p = arrays
    fixed_rot = opts.stage == "rotations_fixed"
    prob = LeastSquaresProblem(eliminate=("points",))
    u_const = np.zeros(len(Rg), dtype=bool)
    u_const[anchor] = True
    s_const = np.zeros(len(Rr), dtype=bool)
    s_const[ref] = True
    prob.add_parameters("unit_rotation", Rg, "so3", constant=np.ones(len(Rg), bool) if fixed_rot else u_const)
    prob.add_parameters("unit_position", c, constant=u_const)
    prob.add_parameters("rig_rotation", Rr, "so3", constant=np.ones(len(Rr), bool) if fixed_rot else s_const)
    prob.add_parameters("rig_translation", t, constant=s_const)
    prob.add_parameters("points", p)
    k = np.flatnonzero(front)
    blocks = [
        ("unit_rotation", index.unit[k]),
        ("unit_position", index.unit[k]),
        ("rig_rotation", index.slot[k]),
        ("rig_translation", index.slot[k]),
        ("points", index.point[k]),
    ]
    refine_f = opts.refine_intrinsics and opts.stage == "full"
    if refine_f:
        prob.add_parameters("focal", index.focal[:, None], lower=1e-6)
        blocks.append(("focal", index.cam_intr[k]))
        fn = _reprojection_residual(obs.pixels[k], index.center[index.cam_intr[k]])
    else:
        fn = _reprojection_residual(obs.pixels[k], index.center[index.cam_intr[k]], index.focal[index.cam_intr[k]])
    prob.add_residuals(fn, blocks, RobustKernel("huber", opts.huber_scale), "reprojection")
    res = levenberg_marquardt(prob, opts.lm_options())

    out = state.copy()
    v = res.values
    for n, u in enumerate(index.units):
        if n != anchor:
            out.unit_rotation[u] = v["unit_rotation"][n].copy()
            out.unit_position[u] = v["unit_position"][n].copy()
    for n, s in enumerate(index.slots):
        if n != ref:
            out.rig.internal_rotation[s] = v["rig_rotation"][n].copy()
            out.rig.internal_translation[s] = v["rig_translation"][n].copy()
    for n, pid in enumerate(index.points):
        out.points[int(pid)] = v["points"][n].copy()
    if refine_f:
        for n, key in enumerate(index.intr):
            out.intrinsics[key] = replace(state.intrinsics[key], focal=float(v["focal"][n, 0]))
    report = {
        "stage": "ba_" + opts.stage,
        "objective_before": res.initial_cost,
        "objective_after": res.final_cost,
        "iterations": res.iterations,
        "status": res.status,
        "active_observations": int(front.sum()),
        "excluded_behind": int((~front).sum()),
    }
    return out, report


def filter_observations(state: ReconstructionState, obs: Observations, max_px: float = 8.0):
    """Drop large-error and behind-camera observations, then under-supported points.

    Returns ``(kept_observations, report)``; the state's points are untouched,
    callers drop points absent from the kept observations.
    """
    err, front = reprojection_errors(state, obs)
    keep = front & (err <= max_px)
    report = {"stage": "filter", "input_observations": len(obs), "dropped_error": int((front & ~keep).sum()),
              "dropped_behind": int((~front).sum())}
    dropped_points = 0
    while True:
        kept = obs.select(keep)
        units = np.array([state.images[i].unit_id for i in kept.image_ids], dtype=np.int64)
        bad = set()
        for pid in np.unique(kept.point_ids):
            m = kept.point_ids == pid
            if m.sum() < 2 or len(np.unique(units[m])) < 2:
                bad.add(int(pid))
        if not bad:
            break
        dropped_points += len(bad)
        keep &= ~np.isin(obs.point_ids, list(bad))
    report["dropped_points"] = dropped_points
    report["kept_observations"] = int(keep.sum())
    return obs.select(keep), report


def _support(state: ReconstructionState, obs: Observations) -> ReconstructionState:
    out = state.copy()
    live = set(int(p) for p in obs.point_ids)
    out.points = {k: v for k, v in out.points.items() if k in live}
    return out


def bundle_adjust(state: ReconstructionState, obs: Observations, options: BaOptions | None = None,
                  anchor_unit=None, reference_slot=None):
    """Rotations-fixed round, filter, full round. Returns ``(state, observations, reports)``."""
    opts = options or BaOptions()
    reports = []
    s1, rep = multi_camera_ba(state, obs, replace(opts, stage="rotations_fixed"), anchor_unit, reference_slot)
    reports.append(rep)
    obs, rep = filter_observations(s1, obs, opts.max_px_filter)
    reports.append(rep)
    s1 = _support(s1, obs)
    s2, rep = multi_camera_ba(s1, obs, replace(opts, stage="full"), anchor_unit, reference_slot)
    reports.append(rep)
    return s2, obs, reports


def single_camera_ba(rotations: dict, centers: dict, points: dict, obs: Observations, intrinsics: dict,
                     huber_scale: float = 2.0, anchor=None, lm: LMOptions | None = None):
    """Ordinary per-camera bundle adjustment (one free pose per image).

    ``intrinsics`` maps image id to ``Intrinsics``. Returns
    ``(rotations, centers, points, LMResult)``.
    """
    ids = sorted(rotations)
    pids = np.array(sorted(points), dtype=np.int64)
    row = {i: k for k, i in enumerate(ids)}
    cam = np.array([row[i] for i in obs.image_ids], dtype=np.int64)
    pt = np.searchsorted(pids, obs.point_ids)
    const = np.zeros(len(ids), dtype=bool)
    const[row[ids[0] if anchor is None else anchor]] = True
    prob = LeastSquaresProblem(eliminate=("points",))
    prob.add_parameters("rotation", np.array([rotations[i] for i in ids]), "so3", constant=const)
    prob.add_parameters("center", np.array([centers[i] for i in ids]), constant=const)
    prob.add_parameters("identity_rotation", np.eye(3)[None], "so3", constant=[True])
    prob.add_parameters("zero_translation", np.zeros((1, 3)), constant=[True])
    prob.add_parameters("points", np.array([points[p] for p in pids]))
    focal = np.array([intrinsics[i].focal for i in obs.image_ids])
    center = np.array([[intrinsics[i].cx, intrinsics[i].cy] for i in obs.image_ids])
    zero = np.zeros(len(obs), dtype=np.int64)
    prob.add_residuals(
        _reprojection_residual(obs.pixels, center, focal),
        [("rotation", cam), ("center", cam), ("identity_rotation", zero), ("zero_translation", zero), ("points", pt)],
        RobustKernel("huber", huber_scale),
        "reprojection",
    )
    res = levenberg_marquardt(prob, lm or LMOptions(max_iter=50, fn_tol=1e-10))
    v = res.values
    return (
        {i: v["rotation"][k].copy() for k, i in enumerate(ids)},
        {i: v["center"][k].copy() for k, i in enumerate(ids)},
        {int(p): v["points"][k].copy() for k, p in enumerate(pids)},
        res,
    )
