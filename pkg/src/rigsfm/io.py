"""Reading and writing view graphs (JSON) and reconstructions (plain text).

Plain-text files hold one record per line, ids ascending::

    images.txt   image_id qw qx qy qz cx cy cz
    units.txt    unit_id  qw qx qy qz cx cy cz
    rig.txt      slot_id  qw qx qy qz tx ty tz
    points.txt   point_id X Y Z
"""

from __future__ import annotations

import json
from pathlib import Path

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
)


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def _num(x):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise InputError(f"expected a number, got {x!r}")
    return x


def _id(x, what: str) -> int:
    if isinstance(x, bool) or not isinstance(x, int) or x < 0:
        raise InputError(f"{what} must be a non-negative integer, got {x!r}")
    return x


def _vec(x, n: int, what: str) -> np.ndarray:
    try:
        v = np.asarray(x, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{what}: not numeric") from exc
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise InputError(f"{what}: expected {n} finite numbers, got {x!r}")
    return v


def view_graph_from_dict(doc: dict) -> ViewGraph:
    if not isinstance(doc, dict):
        raise InputError("view graph document must be a JSON object")
    unknown = set(doc) - {"images", "intrinsics", "edges", "tracks"}
    if unknown:
        raise InputError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        images = {}
        for rec in doc.get("images", []):
            node = ImageNode(
                _id(rec["image_id"], "image_id"),
                _id(rec["unit_id"], "unit_id"),
                _id(rec["slot_id"], "slot_id"),
                _id(rec.get("intrinsics_id", 0), "intrinsics_id"),
            )
            if node.image_id in images:
                raise InputError(f"duplicate image_id {node.image_id}")
            images[node.image_id] = node

        intrinsics = {}
        for rec in doc.get("intrinsics", []):
            k = _id(rec["intrinsics_id"], "intrinsics_id")
            if k in intrinsics:
                raise InputError(f"duplicate intrinsics_id {k}")
            intrinsics[k] = Intrinsics(
                float(rec["focal"]), float(rec["cx"]), float(rec["cy"]), _num(rec["width"]), _num(rec["height"])
            )

        edges = []
        seen = set()
        for rec in doc.get("edges", []):
            i, j = _id(rec["i"], "edge i"), _id(rec["j"], "edge j")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise InputError(f"duplicate edge between images {key[0]} and {key[1]}")
            seen.add(key)
            q = _vec(rec["q"], 4, f"edge ({i}, {j}) q")
            if np.linalg.norm(q) == 0:
                raise InputError(f"edge ({i}, {j}): zero quaternion")
            edges.append(RelativePoseEdge(i, j, q, _vec(rec["t"], 3, f"edge ({i}, {j}) t"), _id(rec["inliers"], "inliers")))

        tracks = []
        for rec in doc.get("tracks", []):
            pid = _id(rec["point_id"], "point_id")
            obs = []
            for o in rec["obs"]:
                iid = _id(o["image_id"], "observation image_id")
                if "bx" in o:
                    b = _vec([o["bx"], o["by"], o["bz"]], 3, f"track {pid} bearing")
                    px = _vec([o["px"], o["py"]], 2, f"track {pid} pixel") if "px" in o else None
                    obs.append(TrackObservation(iid, px, b))
                else:
                    obs.append(TrackObservation(iid, _vec([o["px"], o["py"]], 2, f"track {pid} pixel"), None))
            tracks.append(Track(pid, tuple(obs)))
    except KeyError as exc:
        raise InputError(f"missing field {exc.args[0]!r}") from exc
    except TypeError as exc:
        raise InputError(f"malformed record: {exc}") from exc
    return ViewGraph(images, tuple(edges), tuple(tracks), intrinsics)


def view_graph_to_dict(graph: ViewGraph) -> dict:
    return {
        "images": [
            {"image_id": n.image_id, "unit_id": n.unit_id, "slot_id": n.slot_id, "intrinsics_id": n.intrinsics_id}
            for n in graph.images.values()
        ],
        "intrinsics": [
            {"intrinsics_id": k, "focal": v.focal, "cx": v.cx, "cy": v.cy, "width": v.width, "height": v.height}
            for k, v in sorted(graph.intrinsics.items())
        ],
        "edges": [
            {
                "i": e.i,
                "j": e.j,
                "q": [float(x) for x in e.quaternion],
                "t": [float(x) for x in e.translation],
                "inliers": e.num_inliers,
            }
            for e in graph.edges
        ],
        "tracks": [{"point_id": t.point_id, "obs": [_obs_to_dict(o) for o in t.observations]} for t in graph.tracks],
    }


def _obs_to_dict(o: TrackObservation) -> dict:
    rec = {"image_id": o.image_id}
    if o.pixel is not None:
        rec["px"], rec["py"] = float(o.pixel[0]), float(o.pixel[1])
    if o.bearing is not None:
        rec["bx"], rec["by"], rec["bz"] = (float(x) for x in o.bearing)
    return rec


def dumps_view_graph(graph: ViewGraph) -> str:
    """Canonical text form: one record per line, sections in fixed order."""
    doc = view_graph_to_dict(graph)
    parts = []
    for key in ("images", "intrinsics", "edges", "tracks"):
        rows = ",\n".join(json.dumps(r, separators=(",", ":")) for r in doc[key])
        parts.append(f'"{key}": [\n{rows}\n]' if rows else f'"{key}": []')
    return "{\n" + ",\n".join(parts) + "\n}\n"


def loads_view_graph(text: str) -> ViewGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc}") from exc
    return view_graph_from_dict(doc)


def read_view_graph(path) -> ViewGraph:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    return loads_view_graph(text)


def write_view_graph(graph: ViewGraph, path) -> None:
    Path(path).write_text(dumps_view_graph(graph))


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _pose_lines(records) -> str:
    return "".join(f"{k} {_fmt(so3.to_quaternion(r))} {_fmt(v)}\n" for k, (r, v) in sorted(records.items()))


def write_reconstruction(state: ReconstructionState, out_dir) -> list[Path]:
    """Write images/units/rig/points text files; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "images.txt": _pose_lines(state.camera_poses()),
        "units.txt": _pose_lines({u: (state.unit_rotation[u], state.unit_position[u]) for u in state.unit_rotation}),
        "rig.txt": _pose_lines(
            {s: (state.rig.internal_rotation[s], state.rig.internal_translation[s]) for s in state.rig.internal_rotation}
        ),
        "points.txt": "".join(f"{k} {_fmt(p)}\n" for k, p in sorted(state.points.items())),
    }
    paths = []
    for name, text in files.items():
        (out / name).write_text(text)
        paths.append(out / name)
    return paths


def read_pose_file(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """``id -> (rotation, vector)`` from any of the pose-style text files."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        f = line.split()
        if len(f) != 8:
            raise InputError(f"{path}:{lineno}: expected 8 fields, got {len(f)}")
        try:
            out[int(f[0])] = (so3.from_quaternion([float(x) for x in f[1:5]]), np.array([float(x) for x in f[5:8]]))
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from exc
    return out


def read_points_file(path) -> dict[int, np.ndarray]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            f = line.split()
            out[int(f[0])] = np.array([float(x) for x in f[1:4]])
    return out


def read_reconstruction(directory, images: dict[int, ImageNode] | None = None) -> ReconstructionState:
    """Inverse of :func:`write_reconstruction` (image-to-unit map optional)."""
    d = Path(directory)
    units = read_pose_file(d / "units.txt")
    rig = read_pose_file(d / "rig.txt")
    points = read_points_file(d / "points.txt") if (d / "points.txt").exists() else {}
    return ReconstructionState(
        dict(images or {}),
        {k: r for k, (r, _) in units.items()},
        {k: c for k, (_, c) in units.items()},
        RigCalibration({k: r for k, (r, _) in rig.items()}, {k: t for k, (_, t) in rig.items()}),
        points,
    )
