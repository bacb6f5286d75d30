"""Pipeline configuration: namespaced keys with documented defaults.

A configuration is one JSON document, nested (``{"ba": {"huber_px": 3}}``)
or flat with dotted keys (``{"ba.huber_px": 3}``). Command-line overrides use
the same dotted keys and win over the file.
"""

from __future__ import annotations

import json
from pathlib import Path

from .io import InputError

SKIPPABLE = ("refine_positions", "triangulation", "joint_refine", "ba")

# key -> (default, kind, description)
OPTIONS = {
    "rotation.sigma_deg": (5.0, "float", "Cauchy scale of the rotation IRLS, degrees"),
    "rotation.l1_iterations": (5, "int", "outer L1 passes before IRLS"),
    "rotation.irls_max_iter": (100, "int", "IRLS iteration cap"),
    "rotation.irls_tol_deg": (1e-3, "float", "IRLS stops when the largest update is below this, degrees"),
    "translation.variant": ("hybrid_nonbilinear", "str", "translation schedule"),
    "translation.cauchy_scale": (0.03, "float", "Cauchy scale of the direction residuals (chordal units)"),
    "translation.max_iterations": (100, "int", "LM iteration cap for translation refinements"),
    "translation.function_tolerance": (1e-9, "float", "LM relative cost-decrease tolerance"),
    "translation.max_track_length": (50, "int?", "tracks longer than this are subsampled; null disables"),
    "translation.min_angle_deg": (1.0, "float", "points whose widest ray pair is narrower are dropped"),
    "admm.rho": (1.0, "float", "initial ADMM penalty"),
    "admm.max_iter": (1000, "int", "ADMM iteration cap"),
    "admm.tol": (1e-8, "float", "primal and dual residual tolerance"),
    "ba.huber_px": (2.0, "float", "Huber scale of the reprojection error, pixels"),
    "ba.max_px_filter": (8.0, "float", "between-round observation filter, pixels"),
    "ba.max_iterations": (50, "int", "LM iteration cap per round"),
    "ba.refine_intrinsics": (False, "bool", "refine focal lengths in the second round"),
    "stages.skip": ([], "list", f"stages to skip, any of {list(SKIPPABLE)}"),
    "seed": (0, "int", "seed for every random choice"),
    "threads": (0, "int", "BLAS thread limit; 0 keeps the library default"),
}


def _coerce(key: str, value):
    kind = OPTIONS[key][1]
    try:
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if kind == "int" or (kind == "int?" and value is not None):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind == "int?":
            return None
        if kind == "bool":
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes", "on"):
                    return True
                if value.lower() in ("false", "0", "no", "off"):
                    return False
                raise ValueError
            if not isinstance(value, bool):
                raise ValueError
            return value
        if kind == "list":
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ValueError
            return list(value)
        if not isinstance(value, str):
            raise ValueError
        return value
    except (TypeError, ValueError):
        raise InputError(f"config key {key!r}: cannot use {value!r} as {kind}") from None


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


class PipelineConfig:
    """Validated flat mapping of dotted keys to values."""

    def __init__(self, values: dict | None = None):
        self._values = {k: (list(d) if isinstance(d, list) else d) for k, (d, _, _) in OPTIONS.items()}
        self.update(values or {})

    def update(self, values: dict) -> "PipelineConfig":
        flat = _flatten(values)
        unknown = sorted(set(flat) - set(OPTIONS))
        if unknown:
            raise InputError(f"unknown config keys: {unknown}")
        for k, v in flat.items():
            self._values[k] = _coerce(k, v)
        self._check()
        return self

    def _check(self):
        bad = [s for s in self._values["stages.skip"] if s not in SKIPPABLE]
        if bad:
            raise InputError(f"stages.skip: unknown stage(s) {bad}; expected any of {list(SKIPPABLE)}")
        from .translation import VARIANTS

        if self._values["translation.variant"] not in VARIANTS:
            raise InputError(f"translation.variant must be one of {list(VARIANTS)}")
        if self._values["translation.variant"] != "hybrid_nonbilinear" and set(self._values["stages.skip"]) - {"ba"}:
            raise InputError("only 'ba' can be skipped when translation.variant is not hybrid_nonbilinear")
        for k in ("rotation.sigma_deg", "translation.cauchy_scale", "admm.rho", "ba.huber_px", "ba.max_px_filter"):
            if not self._values[k] > 0:
                raise InputError(f"{k} must be positive")
        if self._values["threads"] < 0:
            raise InputError("threads must be non-negative")

    def __getitem__(self, key: str):
        return self._values[key]

    def skips(self, stage: str) -> bool:
        return stage in self._values["stages.skip"]

    def to_dict(self) -> dict:
        """Nested form, suitable for writing back as a config file."""
        out: dict = {}
        for k, v in self._values.items():
            node = out
            *head, last = k.split(".")
            for h in head:
                node = node.setdefault(h, {})
            node[last] = v
        return out

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "PipelineConfig":
        cfg = cls()
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise InputError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise InputError("config must be a JSON object")
            cfg.update(doc)
        if overrides:
            cfg.update(overrides)
        return cfg

    # -- per-module options ----------------------------------------------------

    def rotation_options(self):
        from .rotation import RotationOptions

        return RotationOptions(
            sigma_deg=self["rotation.sigma_deg"],
            l1_iterations=self["rotation.l1_iterations"],
            irls_max_iter=self["rotation.irls_max_iter"],
            irls_tol_deg=self["rotation.irls_tol_deg"],
        )

    def translation_options(self):
        from .solvers import AdmmOptions, LMOptions
        from .translation import TranslationOptions

        return TranslationOptions(
            cauchy_scale=self["translation.cauchy_scale"],
            admm=AdmmOptions(rho=self["admm.rho"], max_iter=self["admm.max_iter"], primal_tol=self["admm.tol"],
                             dual_tol=self["admm.tol"]),
            lm=LMOptions(max_iter=self["translation.max_iterations"], fn_tol=self["translation.function_tolerance"]),
            max_track_length=self["translation.max_track_length"],
            min_triangulation_angle_deg=self["translation.min_angle_deg"],
            seed=self["seed"],
        )

    def ba_options(self):
        from .bundle import BaOptions

        return BaOptions(
            huber_scale=self["ba.huber_px"],
            max_px_filter=self["ba.max_px_filter"],
            max_iterations=self["ba.max_iterations"],
            refine_intrinsics=self["ba.refine_intrinsics"],
        )


def parse_overrides(tokens: list[str]) -> dict:
    """``["--ba.huber_px=3", "--stages.skip", "ba"]`` -> ``{"ba.huber_px": "3", "stages.skip": "ba"}``.

    Values stay strings (or parsed JSON when they look like JSON) and are
    coerced against the option table later.
    """
    out = {}
    k = 0
    while k < len(tokens):
        tok = tokens[k]
        if not tok.startswith("--"):
            raise InputError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if k + 1 >= len(tokens):
                raise InputError(f"option --{key} needs a value")
            k += 1
            value = tokens[k]
        try:
            parsed = json.loads(value)
            value = parsed if isinstance(parsed, (list, bool, int, float)) or parsed is None else value
        except json.JSONDecodeError:
            pass
        out[key] = value
        k += 1
    return out
