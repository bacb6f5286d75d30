"""End-to-end orchestration: view graph in, reconstruction and stage reports out."""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .bundle import bundle_adjust, observations_from_graph
from .config import PipelineConfig
from .evaluation import errors_from_poses, pose_errors
from .rotation import decoupled_rotation_averaging
from .scene import (
    DisconnectedGraphError,
    ReconstructionState,
    RigCalibration,
    ViewGraph,
    largest_connected_component,
    validate,
)
from .solvers import SingularSystemError, SolverError
from .translation import VARIANTS, average_translations

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_INTERNAL = 4


class StageError(RuntimeError):
    """A pipeline stage failed; ``kind`` is ``"solver"`` or ``"internal"``."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.kind = "solver" if isinstance(cause, (SolverError, SingularSystemError, DisconnectedGraphError)) else "internal"
        super().__init__(f"stage {stage!r} failed: {cause}")

    @property
    def exit_code(self) -> int:
        return EXIT_SOLVER if self.kind == "solver" else EXIT_INTERNAL

    def record(self) -> dict:
        return {"status": f"{self.kind}-error", "stage": self.stage, "error": type(self.cause).__name__,
                "message": str(self.cause)}


@dataclass
class SolveResult:
    state: ReconstructionState
    graph: ViewGraph
    reports: list = field(default_factory=list)
    last_stage: str = ""


def _thread_limit(n: int):
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


class _Stage:
    def __init__(self, name, reports):
        self.name = name
        self.reports = reports

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, io.InputError)):
            raise StageError(self.name, exc) from exc
        return False


def solve(graph: ViewGraph, config: PipelineConfig | None = None) -> SolveResult:
    """Validate, keep the largest component, average rotations and translations, then adjust.

    Raises:
        io.InputError: the graph fails validation.
        StageError: a stage failed numerically or internally.
    """
    cfg = config or PipelineConfig()
    problems = validate(graph)
    if problems:
        raise io.InputError("invalid view graph: " + "; ".join(problems[:10]))
    reports: list = []
    with _thread_limit(cfg["threads"]):
        with _Stage("largest_component", reports):
            lcc = largest_connected_component(graph)
            reports.append({"stage": "largest_component", "images": len(lcc.images), "of_images": len(graph.images),
                            "units": len(lcc.unit_ids), "edges": len(lcc.edges)})
        if len(lcc.unit_ids) < 2:
            raise StageError("largest_component", DisconnectedGraphError([lcc.unit_ids]))

        with _Stage("rotation_averaging", reports):
            rot = decoupled_rotation_averaging(lcc, cfg.rotation_options())
            reports.append({"stage": "rotation_averaging", **rot.report})

        variant = cfg["translation.variant"]
        topts = cfg.translation_options()
        with _Stage("translation_averaging", reports):
            tr = _translate(lcc, rot.camera_rotations, variant, topts, cfg)
            reports.extend(tr.reports)
        last = tr.reports[-1]["stage"] if tr.reports else "rotation_averaging"

        state = ReconstructionState(
            dict(lcc.images),
            {u: r.copy() for u, r in rot.unit_rotations.items()},
            {u: c.copy() for u, c in tr.unit_position.items()},
            RigCalibration(
                {s: r.copy() for s, r in rot.rig_rotations.items()},
                {s: tr.internal_translation.get(s, np.zeros(3)).copy() for s in rot.rig_rotations},
            ),
            dict(tr.points),
            dict(lcc.intrinsics),
        )

        if not cfg.skips("ba") and state.points:
            with _Stage("bundle_adjustment", reports):
                obs = observations_from_graph(lcc, state)
                if len(obs) == 0:
                    reports.append({"stage": "bundle_adjustment", "skipped": "no observations"})
                else:
                    state, _, ba_reports = bundle_adjust(state, obs, cfg.ba_options(), lcc.anchor_unit, lcc.reference_slot)
                    reports.extend(ba_reports)
                    last = "ba_full"
        elif not cfg.skips("ba"):
            reports.append({"stage": "bundle_adjustment", "skipped": "no points"})
    return SolveResult(state, lcc, reports, last)


def _translate(graph, rotations, variant, topts, cfg):
    """Translation schedule honoring ``stages.skip`` for the hybrid stages."""
    from . import translation as T

    if not any(cfg.skips(s) for s in ("refine_positions", "triangulation", "joint_refine")):
        return average_translations(graph, rotations, variant, topts)
    cams = T.make_cameras(graph, rotations)
    reports = []
    c, t, s, rep = T.init_positions_l1(cams, topts)
    reports.append(rep)
    if not cfg.skips("refine_positions"):
        c, t, rep = T.refine_positions_angle(cams, c, t, topts)
        reports.append(rep)
    points = {}
    if not cfg.skips("triangulation"):
        tracks = T.make_tracks(cams, topts.max_track_length)
        P, tracks, rep = T.triangulate_l1(cams, c, t, tracks, topts)
        reports.append(rep)
        if not cfg.skips("joint_refine") and tracks.num_points:
            c, t, P, rep = T.joint_refine(cams, c, t, P, tracks, topts)
            reports.append(rep)
        points = {pid: P[k].copy() for k, pid in enumerate(tracks.point_ids)}
    uc, ut = cams.fields(c, t)
    return T.TranslationResult(uc, ut, points, reports)


# -- artifacts -------------------------------------------------------------------


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _clean(o):
    """Replace non-finite floats (not valid JSON) with None."""
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    return o


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_clean(json.loads(json.dumps(obj, default=_json_default))), indent=2, sort_keys=True) + "\n")


def write_solution(result: SolveResult, out_dir, cfg: PipelineConfig) -> list[Path]:
    out = Path(out_dir)
    paths = io.write_reconstruction(result.state, out)
    rep_dir = out / "reports"
    rep_dir.mkdir(exist_ok=True)
    for k, rep in enumerate(result.reports):
        p = rep_dir / f"{k:02d}_{rep['stage']}.json"
        dump_json(rep, p)
        paths.append(p)
    dump_json({"status": "ok", "final_stage": result.last_stage, "images": len(result.state.images),
               "units": len(result.state.unit_position), "points": len(result.state.points)}, out / "summary.json")
    dump_json(cfg.to_dict(), out / "config_used.json")
    return paths + [out / "summary.json", out / "config_used.json"]


# -- ablation ----------------------------------------------------------------------

ABLATION_FIELDS = ("variant", "status", "median_position", "mean_position", "relative_scale_error", "points", "message")


def ablate(graph: ViewGraph, truth: ReconstructionState, config: PipelineConfig | None = None, variants=VARIANTS):
    """Run every translation variant with the true rotations; one row per variant.

    Per-variant failures are recorded in their row and the run continues.
    """
    cfg = config or PipelineConfig()
    problems = validate(graph)
    if problems:
        raise io.InputError("invalid view graph: " + "; ".join(problems[:10]))
    lcc = largest_connected_component(graph)
    truth_poses = truth.camera_poses()
    missing = [i for i in lcc.images if i not in truth_poses]
    if missing:
        raise io.InputError(f"truth lacks poses for {len(missing)} images, e.g. {missing[:5]}")
    rotations = {i: truth_poses[i][0] for i in lcc.images}
    topts = cfg.translation_options()
    rows = []
    for v in variants:
        log.info("ablation variant %s", v)
        try:
            with _thread_limit(cfg["threads"]):
                res = average_translations(lcc, rotations, v, topts)
            rig = RigCalibration({s: truth.rig.internal_rotation[s] for s in res.internal_translation},
                                 dict(res.internal_translation))
            est = ReconstructionState(dict(lcc.images), {u: truth.unit_rotation[u] for u in res.unit_position},
                                      res.unit_position, rig, res.points)
            rep = errors_from_poses(est.camera_poses(), {i: truth_poses[i] for i in lcc.images},
                                    {u: (truth.unit_rotation[u], res.unit_position[u]) for u in res.unit_position},
                                    {u: (truth.unit_rotation[u], truth.unit_position[u]) for u in res.unit_position},
                                    {s: (rig.internal_rotation[s], rig.internal_translation[s]) for s in rig.internal_rotation},
                                    {s: (truth.rig.internal_rotation[s], truth.rig.internal_translation[s]) for s in rig.internal_rotation})
            rows.append({"variant": v, "status": "ok", "median_position": rep.median_position,
                         "mean_position": rep.mean_position, "relative_scale_error": rep.relative_scale_error,
                         "points": len(res.points), "message": ""})
        except Exception as exc:  # noqa: BLE001 - a failed variant is a result, not a crash
            log.warning("variant %s failed: %s", v, exc)
            rows.append({"variant": v, "status": "failed", "median_position": float("nan"), "mean_position": float("nan"),
                         "relative_scale_error": float("nan"), "points": 0, "message": f"{type(exc).__name__}: {exc}"})
    return rows


def ablation_csv(rows) -> str:
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


__all__ = ["solve", "ablate", "ablation_csv", "write_solution", "SolveResult", "StageError", "pose_errors",
           "EXIT_OK", "EXIT_INPUT", "EXIT_SOLVER", "EXIT_INTERNAL"]
