"""Ground-truth rig scenes and the measurements a front-end would produce.

World frame is z-up, in meters. A rig frame (and every camera frame) has x
right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3
from .scene import (
    ImageNode,
    Intrinsics,
    ReconstructionState,
    RelativePoseEdge,
    RigCalibration,
    Track,
    TrackObservation,
    ViewGraph,
    largest_connected_component,
)

TRAJECTORIES = ("loop", "line", "random_walk")


def slot_pose(yaw_deg: float, offset) -> tuple[np.ndarray, np.ndarray]:
    """Internal pose of a camera yawed right by ``yaw_deg`` at rig-frame ``offset``."""
    a = np.deg2rad(yaw_deg)
    forward = np.array([np.sin(a), 0.0, np.cos(a)])
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, forward)
    r = np.stack([right, down, forward])
    return r, -r @ np.asarray(offset, dtype=float)


def default_rig(num_slots: int = 3) -> list[tuple[np.ndarray, np.ndarray]]:
    """Forward camera plus cameras fanned out left and right (0.5-1.5 m baselines)."""
    layouts = {
        1: [(0.0, (0, 0, 0))],
        2: [(0.0, (0, 0, 0)), (0.0, (1.0, 0, 0))],
        3: [(0.0, (0, 0, 0)), (-55.0, (-0.6, 0.0, -0.3)), (55.0, (0.6, 0.0, -0.3))],
        4: [(0.0, (0, 0, 0)), (-55.0, (-0.6, 0.0, -0.3)), (55.0, (0.6, 0.0, -0.3)), (180.0, (0.0, 0.0, -1.5))],
    }
    if num_slots not in layouts:
        raise ValueError("default_rig supports 1 to 4 slots")
    return [slot_pose(y, o) for y, o in layouts[num_slots]]


def front_back_rig(baseline: float = 1.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Two cameras looking forward and backward, no shared field of view."""
    return [slot_pose(0.0, (0, 0, 0)), slot_pose(180.0, (0.0, 0.0, -baseline))]


@dataclass
class SceneConfig:
    num_units: int = 50
    slots: list = field(default_factory=lambda: default_rig(3))
    trajectory: str = "loop"
    extent: float = 100.0
    num_points: int = 2000
    point_region: tuple | None = None
    pixel_noise_sigma: float = 0.0
    rotation_noise_sigma: float = 0.0
    translation_noise_sigma: float | None = None
    edge_outlier_fraction: float = 0.0
    bearing_outlier_fraction: float = 0.0
    intra_unit_edges: bool = True
    loop_closures: bool = True
    seed: int = 0
    focal: float = 500.0
    edge_window: int = 3
    min_shared_points: int = 10
    max_depth: float = 60.0
    observation: str = "pixel"

    def check(self):
        problems = []
        if self.num_units < 2:
            problems.append("num_units must be at least 2")
        if not self.slots:
            problems.append("at least one slot is required")
        if self.trajectory not in TRAJECTORIES:
            problems.append(f"trajectory must be one of {TRAJECTORIES}")
        for name in ("edge_outlier_fraction", "bearing_outlier_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                problems.append(f"{name} must lie in [0, 1)")
        for name in ("pixel_noise_sigma", "rotation_noise_sigma"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if self.observation not in ("pixel", "bearing"):
            problems.append("observation must be 'pixel' or 'bearing'")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneConfig":
        """Build from JSON-like data.

        ``slots`` is a count, ``{"default": n}``, ``{"front_back": baseline}``
        or a list of ``{"yaw_deg", "offset"}``.
        """
        doc = dict(doc)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        slots = doc.pop("slots", None)
        if isinstance(slots, int) and not isinstance(slots, bool):
            doc["slots"] = default_rig(slots)
        elif isinstance(slots, dict) and "default" in slots:
            doc["slots"] = default_rig(int(slots["default"]))
        elif isinstance(slots, dict) and "front_back" in slots:
            doc["slots"] = front_back_rig(float(slots["front_back"]))
        elif slots is not None:
            doc["slots"] = [slot_pose(s.get("yaw_deg", 0.0), s.get("offset", (0, 0, 0))) for s in slots]
        if "point_region" in doc and doc["point_region"] is not None:
            doc["point_region"] = tuple(tuple(v) for v in doc["point_region"])
        return cls(**doc)


def _trajectory(cfg: SceneConfig, rng: np.random.Generator):
    n = cfg.num_units
    if cfg.trajectory == "loop":
        radius = cfg.extent / 2.0
        theta = 2.0 * np.pi * np.arange(n) / n
        pos = np.stack([radius * np.cos(theta), radius * np.sin(theta), np.zeros(n)], axis=1)
        yaw = theta + np.pi / 2.0
    elif cfg.trajectory == "line":
        # uneven spacing, as from a vehicle changing speed
        speed = 1.0 + 0.45 * np.sin(2.0 * np.pi * np.arange(n - 1) / max(n - 1, 1) * 1.5 + rng.uniform(0, 2 * np.pi))
        steps = speed / speed.sum() * cfg.extent
        x = np.concatenate([[0.0], np.cumsum(steps)])
        pos = np.stack([x, np.zeros(n), np.zeros(n)], axis=1)
        yaw = np.zeros(n)
    else:
        step = cfg.extent / n
        yaw = np.cumsum(rng.normal(0.0, np.deg2rad(10.0), size=n))
        pos = np.zeros((n, 3))
        for k in range(1, n):
            pos[k] = pos[k - 1] + step * np.array([np.cos(yaw[k - 1]), np.sin(yaw[k - 1]), 0.0])
    pos[:, 2] = 1.5
    rots = []
    for y in yaw:
        f = np.array([np.cos(y), np.sin(y), 0.0])
        r = np.array([np.sin(y), -np.cos(y), 0.0])
        rots.append(np.stack([r, [0.0, 0.0, -1.0], f]))
    return np.array(rots), pos, yaw


def _sample_points(cfg: SceneConfig, rng, pos, yaw, count):
    if cfg.point_region is not None:
        lo, hi = (np.asarray(v, dtype=float) for v in cfg.point_region)
        return rng.uniform(lo, hi, size=(count, 3))
    # a street: points on both sides of the path, at building-ish heights
    k = rng.integers(0, len(pos), size=count)
    along = rng.uniform(-0.5, 0.5, size=count) * np.maximum(cfg.extent / len(pos), 1.0) * 2.0
    side = rng.choice([-1.0, 1.0], size=count)
    lateral = side * rng.uniform(4.0, 15.0, size=count)
    height = rng.uniform(-1.0, 8.0, size=count)
    f = np.stack([np.cos(yaw[k]), np.sin(yaw[k]), np.zeros(count)], axis=1)
    left = np.stack([-np.sin(yaw[k]), np.cos(yaw[k]), np.zeros(count)], axis=1)
    p = pos[k] + along[:, None] * f + lateral[:, None] * left
    p[:, 2] = height
    return p


def _perturb(rng, sigma_rad: float, size: int) -> np.ndarray:
    """Rotations whose angle has RMS ``sigma_rad``."""
    return so3.exp(rng.normal(0.0, sigma_rad / np.sqrt(3.0), size=(size, 3)))


def generate_scene(cfg: SceneConfig) -> tuple[ReconstructionState, ViewGraph]:
    """Deterministic (in ``cfg.seed``) ground truth plus noisy view graph.

    Raises:
        ValueError: for invalid configs or scenes with fewer than two
            co-visible units.
    """
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    unit_rot, unit_pos, yaw = _trajectory(cfg, rng)
    n_units, n_slots = cfg.num_units, len(cfg.slots)
    rig_rot = np.array([np.asarray(r, dtype=float) for r, _ in cfg.slots])
    rig_t = np.array([np.asarray(t, dtype=float) for _, t in cfg.slots])

    half = cfg.focal  # 90 degree field of view
    intr = Intrinsics(cfg.focal, half, half, 2.0 * half, 2.0 * half)

    img_unit = np.repeat(np.arange(n_units), n_slots)
    img_slot = np.tile(np.arange(n_slots), n_units)
    cam_R = rig_rot[img_slot] @ unit_rot[img_unit]
    cam_c = unit_pos[img_unit] - np.einsum("nji,nj->ni", cam_R, rig_t[img_slot])
    n_img = len(img_unit)

    limit = 0.98
    points, vis = [], []
    need = cfg.num_points
    while need > 0:
        cand = _sample_points(cfg, rng, unit_pos, yaw, max(2 * need, 64))
        X = np.einsum("nij,pnj->pni", cam_R, cand[:, None, :] - cam_c[None])
        z = X[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            v = (z > 0.5) & (z < cfg.max_depth) & (np.abs(X[..., 0] / z) < limit) & (np.abs(X[..., 1] / z) < limit)
        units_seen = np.array([len(set(img_unit[row])) for row in v])
        ok = (v.sum(axis=1) >= 2) & (units_seen >= 2)
        take = np.flatnonzero(ok)[:need]
        points.extend(cand[take])
        vis.extend(v[take])
        need -= len(take)
        if len(points) == 0 and need == cfg.num_points:
            raise ValueError("no point is seen from two units; check the scene configuration")
    points = np.array(points)
    vis = np.array(vis)

    shared = vis.T.astype(np.int64) @ vis.astype(np.int64)
    pairs = []
    for i in range(n_img):
        for j in range(i + 1, n_img):
            du = abs(int(img_unit[i]) - int(img_unit[j]))
            if du == 0:
                ok = cfg.intra_unit_edges and shared[i, j] >= cfg.min_shared_points
            elif du <= cfg.edge_window:
                ok = shared[i, j] >= cfg.min_shared_points or (du == 1 and img_slot[i] == img_slot[j])
            else:
                ok = cfg.loop_closures and shared[i, j] >= cfg.min_shared_points
            if ok:
                pairs.append((i, j))

    inter = [k for k, (i, j) in enumerate(pairs) if img_unit[i] != img_unit[j]]
    n_out = int(round(cfg.edge_outlier_fraction * len(inter)))
    outliers = set(rng.choice(inter, size=n_out, replace=False).tolist()) if n_out else set()
    sig_r = np.deg2rad(cfg.rotation_noise_sigma)
    sig_t = np.deg2rad(cfg.rotation_noise_sigma if cfg.translation_noise_sigma is None else cfg.translation_noise_sigma)
    noise_r = _perturb(rng, sig_r, len(pairs))
    noise_t = _perturb(rng, sig_t, len(pairs))
    edges = []
    for k, (i, j) in enumerate(pairs):
        if k in outliers:
            r = so3.random_rotation(rng)
            t = rng.normal(size=3)
            t /= np.linalg.norm(t)
        else:
            r = cam_R[j] @ cam_R[i].T
            d = cam_c[i] - cam_c[j]
            t = cam_R[j] @ (d / np.linalg.norm(d))
            if sig_r > 0:
                r = noise_r[k] @ r
            if sig_t > 0:
                t = noise_t[k] @ t
        edges.append(RelativePoseEdge.from_matrix(i, j, r, t / np.linalg.norm(t), max(int(shared[i, j]), 1)))

    obs_p, obs_i = np.nonzero(vis)
    n_obs = len(obs_p)
    n_bad = int(round(cfg.bearing_outlier_fraction * n_obs))
    bad = np.zeros(n_obs, dtype=bool)
    if n_bad:
        bad[rng.choice(n_obs, size=n_bad, replace=False)] = True
    Xc = np.einsum("nij,nj->ni", cam_R[obs_i], points[obs_p] - cam_c[obs_i])
    px = intr.project(Xc)
    if cfg.pixel_noise_sigma > 0:
        px = px + rng.normal(0.0, cfg.pixel_noise_sigma, size=px.shape)
    if n_bad:
        if cfg.observation == "pixel":
            px[bad] = rng.uniform(0.0, 2.0 * half, size=(n_bad, 2))
        else:
            h = rng.normal(size=(n_bad, 3))
            h[:, 2] = np.abs(h[:, 2])
            h /= np.linalg.norm(h, axis=1, keepdims=True)
    tracks = []
    by_point: dict[int, list] = {}
    hemi = iter(h) if (n_bad and cfg.observation == "bearing") else None
    for k in range(n_obs):
        p, i = int(obs_p[k]), int(obs_i[k])
        if cfg.observation == "pixel":
            o = TrackObservation(i, px[k].copy(), None)
        else:
            b = next(hemi) if bad[k] else intr.bearing(px[k])
            o = TrackObservation(i, None, b / np.linalg.norm(b))
        by_point.setdefault(p, []).append(o)
    for p in sorted(by_point):
        tracks.append(Track(p, tuple(by_point[p])))

    images = {i: ImageNode(i, int(img_unit[i]), int(img_slot[i]), int(img_slot[i])) for i in range(n_img)}
    graph = ViewGraph(images, tuple(edges), tuple(tracks), {s: intr for s in range(n_slots)})
    lcc = largest_connected_component(graph)
    if len(lcc.unit_ids) < 2:
        raise ValueError("generated scene has fewer than two co-visible units")

    truth = ReconstructionState(
        dict(images),
        {u: unit_rot[u].copy() for u in range(n_units)},
        {u: unit_pos[u].copy() for u in range(n_units)},
        RigCalibration({s: rig_rot[s].copy() for s in range(n_slots)}, {s: rig_t[s].copy() for s in range(n_slots)}),
        {p: points[p].copy() for p in range(len(points))},
        {s: intr for s in range(n_slots)},
    )
    return truth, graph


def edge_outlier_mask(graph: ViewGraph, truth: ReconstructionState, threshold_deg: float = 20.0) -> np.ndarray:
    """Edges whose rotation disagrees with the truth by more than ``threshold_deg``."""
    out = []
    for e in graph.edges:
        r = truth.camera_rotation(e.j) @ truth.camera_rotation(e.i).T
        out.append(np.rad2deg(so3.geodesic_distance(e.rotation, r)) > threshold_deg)
    return np.array(out, dtype=bool)
