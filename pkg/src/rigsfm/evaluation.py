"""Accuracy of a reconstruction against ground truth after similarity alignment."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import so3
from .scene import ReconstructionState


def lower_median(values) -> float:
    """Lower-middle order statistic (NaN for empty input)."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if len(v) == 0:
        return float("nan")
    return float(v[(len(v) - 1) // 2])


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Least-squares ``(s, Q, tau)`` with ``dst ~ s Q src + tau``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    Q = U @ D @ Vt
    var = (xs * xs).sum() / len(src)
    s = float(np.trace(np.diag(S) @ D) / var) if with_scale and var > 0 else 1.0
    return s, Q, mu_d - s * Q @ mu_s


def align_similarity(est_centers, true_centers, est_rotations=None, true_rotations=None):
    """Similarity taking estimated centers onto true ones.

    When the true centers are (nearly) collinear the roll about the line is
    unobservable from positions alone; if rotations are given, each center
    is then augmented with a point one hundredth of its set's extent along
    the camera's optical axis.
    """
    est = np.asarray(est_centers, dtype=float).reshape(-1, 3)
    true = np.asarray(true_centers, dtype=float).reshape(-1, 3)
    if len(est) != len(true):
        raise ValueError("estimated and true centers differ in count")
    if len(est) < 3:
        raise ValueError("need at least three corresponding cameras")
    sv = np.linalg.svd(true - true.mean(axis=0), compute_uv=False)
    if sv[0] == 0:
        raise ValueError("true centers coincide; similarity is undefined")
    if sv[1] / sv[0] < 1e-3 and est_rotations is not None and true_rotations is not None:
        fe = np.asarray(est_rotations)[:, 2, :]
        ft = np.asarray(true_rotations)[:, 2, :]
        # rotation-invariant extents, so the offsets transform with the similarity
        ext_e = np.linalg.norm(est - est.mean(axis=0), axis=1).max() / 100.0
        ext_t = np.linalg.norm(true - true.mean(axis=0), axis=1).max() / 100.0
        est = np.vstack([est, est + ext_e * fe])
        true = np.vstack([true, true + ext_t * ft])
    return umeyama(est, true)


@dataclass
class ErrorReport:
    rotation_error_deg: dict
    position_error: dict
    unit_rotation_error_deg: dict
    unit_position_error: dict
    scale: float
    median_rotation_deg: float
    mean_rotation_deg: float
    median_position: float
    mean_position: float
    max_rotation_deg: float
    median_unit_rotation_deg: float
    relative_scale_error: float
    rig_rotation_error_deg: dict
    rig_translation_error: dict
    num_images: int

    def summary(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, dict):
                d[k] = {str(i): x for i, x in v.items()}
        return d

    def table(self) -> str:
        """Aligned plain-text summary."""
        rows = [
            ("images", str(self.num_images)),
            ("median rotation (deg)", f"{self.median_rotation_deg:.6g}"),
            ("mean rotation (deg)", f"{self.mean_rotation_deg:.6g}"),
            ("median position", f"{self.median_position:.6g}"),
            ("mean position", f"{self.mean_position:.6g}"),
            ("median unit rotation (deg)", f"{self.median_unit_rotation_deg:.6g}"),
            ("relative scale error", f"{self.relative_scale_error:.6g}"),
        ]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(w)}  {v}" for k, v in rows) + "\n"


def trajectory_scale_error(est_units: dict, true_units: dict, scale: float) -> float:
    """Median over consecutive-unit segments of ``|s |dc_est| - |dc_true|| / |dc_true|``."""
    ids = sorted(set(est_units) & set(true_units))
    errs = []
    for a, b in zip(ids[:-1], ids[1:]):
        dt = np.linalg.norm(np.asarray(true_units[b]) - np.asarray(true_units[a]))
        de = np.linalg.norm(np.asarray(est_units[b]) - np.asarray(est_units[a]))
        if dt > 0:
            errs.append(abs(scale * de - dt) / dt)
    return lower_median(errs)


def pose_errors(est: ReconstructionState, truth: ReconstructionState, strict: bool = True) -> ErrorReport:
    """Per-image, per-unit and rig errors of ``est`` after aligning it to ``truth``.

    With ``strict`` the two states must cover the same images; otherwise
    only the shared images are compared.
    """
    return errors_from_poses(
        est.camera_poses(),
        truth.camera_poses(),
        _unit_poses(est),
        _unit_poses(truth),
        _rig_poses(est),
        _rig_poses(truth),
        strict=strict,
    )


def _unit_poses(state):
    return {u: (state.unit_rotation[u], state.unit_position[u]) for u in state.unit_rotation if u in state.unit_position}


def _rig_poses(state):
    return {s: (r, state.rig.internal_translation[s]) for s, r in state.rig.internal_rotation.items()}


def errors_from_poses(est_poses: dict, true_poses: dict, est_units=None, true_units=None, est_rig=None,
                      true_rig=None, strict: bool = True) -> ErrorReport:
    """Same as :func:`pose_errors` on ``id -> (R, c)`` dictionaries.

    Unit poses are ``(R^g, c^g)`` and rig poses ``(R^r, t^r)``; both are
    optional. Units are compared through the reference (lowest id) slot so
    that the result does not depend on how each side fixed the rig gauge.
    """
    if strict and set(est_poses) != set(true_poses):
        missing = sorted(set(true_poses) ^ set(est_poses))
        raise ValueError(f"image sets differ ({len(missing)} images not in both, e.g. {missing[:5]})")
    ids = sorted(set(est_poses) & set(true_poses))
    if len(ids) < 3:
        raise ValueError("need at least three images shared between estimate and truth")
    Re = np.array([est_poses[i][0] for i in ids])
    Rt = np.array([true_poses[i][0] for i in ids])
    ce = np.array([est_poses[i][1] for i in ids])
    ct = np.array([true_poses[i][1] for i in ids])
    s, Q, tau = align_similarity(ce, ct, Re, Rt)

    rot_err = np.rad2deg(so3.angle(Re @ Q.T @ np.transpose(Rt, (0, 2, 1))))
    pos_err = np.linalg.norm(s * ce @ Q.T + tau - ct, axis=1)

    est_units, true_units = est_units or {}, true_units or {}
    est_rig, true_rig = est_rig or {}, true_rig or {}
    units = sorted(set(est_units) & set(true_units))
    shared_slots = sorted(set(est_rig) & set(true_rig))
    u_rot, u_pos = {}, {}
    rse = float("nan")
    if units and shared_slots:
        ref = shared_slots[0]
        (rre, tre), (rrt, trt) = est_rig[ref], true_rig[ref]
        Ue = np.array([rre @ est_units[u][0] for u in units])
        Ut = np.array([rrt @ true_units[u][0] for u in units])
        e = np.rad2deg(so3.angle(Ue @ Q.T @ np.transpose(Ut, (0, 2, 1))))
        u_rot = {u: float(v) for u, v in zip(units, e)}
        # reference-camera centers: gauge-free stand-ins for unit positions
        pe = np.array([est_units[u][1] for u in units]) - np.einsum("nji,j->ni", Ue, tre)
        pt = np.array([true_units[u][1] for u in units]) - np.einsum("nji,j->ni", Ut, trt)
        d = np.linalg.norm(s * pe @ Q.T + tau - pt, axis=1)
        u_pos = {u: float(v) for u, v in zip(units, d)}
        rse = trajectory_scale_error(dict(zip(units, pe)), dict(zip(units, pt)), s)

    rig_rot, rig_t = {}, {}
    for sl in shared_slots:
        rig_rot[sl] = float(np.rad2deg(so3.geodesic_distance(est_rig[sl][0], true_rig[sl][0])))
        rig_t[sl] = float(np.linalg.norm(s * est_rig[sl][1] - true_rig[sl][1]))

    return ErrorReport(
        rotation_error_deg={i: float(v) for i, v in zip(ids, rot_err)},
        position_error={i: float(v) for i, v in zip(ids, pos_err)},
        unit_rotation_error_deg=u_rot,
        unit_position_error=u_pos,
        scale=float(s),
        median_rotation_deg=lower_median(rot_err),
        mean_rotation_deg=float(np.mean(rot_err)),
        median_position=lower_median(pos_err),
        mean_position=float(np.mean(pos_err)),
        max_rotation_deg=float(np.max(rot_err)),
        median_unit_rotation_deg=lower_median(list(u_rot.values())),
        relative_scale_error=rse,
        rig_rotation_error_deg=rig_rot,
        rig_translation_error=rig_t,
        num_images=len(ids),
    )
