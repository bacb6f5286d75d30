"""Command line: ``solve``, ``synth``, ``evaluate`` and ``ablate``.

Progress goes to stderr; machine-readable results go to files, and a one-line
JSON status record goes to stdout. Exit codes: 0 success, 2 input error,
3 solver failure, 4 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from . import io
from .config import OPTIONS, PipelineConfig, parse_overrides
from .evaluation import errors_from_poses
from .pipeline import (
    EXIT_INPUT,
    EXIT_INTERNAL,
    EXIT_OK,
    StageError,
    ablate,
    ablation_csv,
    dump_json,
    solve,
    write_solution,
)
from .synthetic import SceneConfig, generate_scene

log = logging.getLogger("rigsfm")


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _input_error(exc) -> int:
    _emit({"status": "input-error", "message": str(exc)})
    log.error("%s", exc)
    return EXIT_INPUT


def _publish(tmp: Path, out: Path) -> None:
    """Move the finished artifacts from the staging directory into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    for p in sorted(tmp.iterdir()):
        dest = out / p.name
        if dest.is_dir():
            shutil.rmtree(dest)
        shutil.move(str(p), str(dest))


def cmd_solve(args, overrides) -> int:
    try:
        cfg = PipelineConfig.load(args.config, overrides)
        graph = io.read_view_graph(args.graph)
    except io.InputError as exc:
        return _input_error(exc)
    out = Path(args.output)
    try:
        result = solve(graph, cfg)
    except io.InputError as exc:
        return _input_error(exc)
    except StageError as exc:
        log.error("%s", exc)
        rec = {**exc.record(), "partial": True}
        out.mkdir(parents=True, exist_ok=True)
        dump_json(rec, out / "error.json")
        _emit(rec)
        return exc.exit_code
    with tempfile.TemporaryDirectory(dir=out.parent if out.parent.exists() else None) as tmp:
        write_solution(result, tmp, cfg)
        _publish(Path(tmp), out)
    _emit({"status": "ok", "output": str(out), "final_stage": result.last_stage,
           "images": len(result.state.images), "points": len(result.state.points)})
    return EXIT_OK


def cmd_synth(args, overrides) -> int:
    try:
        doc = json.loads(Path(args.config).read_text()) if args.config else {}
        if not isinstance(doc, dict):
            raise io.InputError("scene config must be a JSON object")
        doc.update(overrides)
        cfg = SceneConfig.from_dict(doc)
        truth, graph = generate_scene(cfg)
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        return _input_error(exc)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    io.write_view_graph(graph, out / "graph.json")
    io.write_reconstruction(truth, out / "truth")
    _emit({"status": "ok", "graph": str(out / "graph.json"), "truth": str(out / "truth"),
           "images": len(graph.images), "edges": len(graph.edges), "tracks": len(graph.tracks)})
    return EXIT_OK


def _read_dir(d: Path):
    images = io.read_pose_file(d / "images.txt")
    units = io.read_pose_file(d / "units.txt") if (d / "units.txt").exists() else {}
    rig = io.read_pose_file(d / "rig.txt") if (d / "rig.txt").exists() else {}
    return images, units, rig


def cmd_evaluate(args, overrides) -> int:
    if overrides:
        return _input_error(io.InputError(f"evaluate takes no options, got {sorted(overrides)}"))
    try:
        ei, eu, er = _read_dir(Path(args.estimate))
        ti, tu, tr = _read_dir(Path(args.truth))
        rep = errors_from_poses(ei, ti, eu, tu, er, tr, strict=False)
    except (OSError, ValueError) as exc:
        return _input_error(exc)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    summary = rep.summary()
    summary["missing_images"] = len(set(ti) - set(ei))
    dump_json(summary, out)
    out.with_suffix(".txt").write_text(rep.table())
    sys.stderr.write(rep.table())
    _emit({"status": "ok", "report": str(out), "median_rotation_deg": rep.median_rotation_deg,
           "median_position": rep.median_position})
    return EXIT_OK


def cmd_ablate(args, overrides) -> int:
    try:
        cfg = PipelineConfig.load(args.config, overrides)
        graph = io.read_view_graph(args.graph)
        truth = io.read_reconstruction(args.truth, graph.images)
        rows = ablate(graph, truth, cfg)
    except (OSError, io.InputError) as exc:
        return _input_error(exc)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(ablation_csv(rows))
    dump_json(rows, out / "ablation.json")
    _emit({"status": "ok", "output": str(out), "failed_variants": [r["variant"] for r in rows if r["status"] != "ok"]})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  --{k} (default {d!r}): {doc}" for k, (d, _, doc) in OPTIONS.items())
    p = argparse.ArgumentParser(
        prog="rigsfm",
        description="Global structure-from-motion for rigidly mounted multi-camera systems.",
        epilog="Pipeline options, settable in the config file or as overrides:\n" + keys,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="reconstruct from a view graph")
    s.add_argument("graph")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("-c", "--config")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("-c", "--config")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("evaluate", help="compare a reconstruction with ground truth")
    s.add_argument("estimate")
    s.add_argument("truth")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="compare the translation variants with true rotations")
    s.add_argument("graph")
    s.add_argument("--truth", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("-c", "--config")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(rest)
    except io.InputError as exc:
        return _input_error(exc)
    try:
        return args.func(args, overrides)
    except Exception as exc:  # noqa: BLE001 - last-resort record for scripted callers
        log.exception("internal error")
        _emit({"status": "internal-error", "error": type(exc).__name__, "message": str(exc)})
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
