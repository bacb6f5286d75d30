"""Estimator-style wrappers (scikit-learn conventions).

Each estimator takes its options as constructor arguments, so ``get_params``,
``set_params`` and ``clone`` work as usual; ``fit`` takes a view graph and
sets trailing-underscore attributes.
"""

from __future__ import annotations

from pathlib import Path

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import io
from .bundle import BaOptions, bundle_adjust, observations_from_graph
from .config import PipelineConfig
from .evaluation import pose_errors
from .pipeline import solve
from .rotation import RotationOptions, decoupled_rotation_averaging
from .scene import ReconstructionState, ViewGraph, largest_connected_component, validate
from .solvers import AdmmOptions, LMOptions
from .translation import TranslationOptions, average_translations


def check_view_graph(graph, largest_component: bool = False) -> ViewGraph:
    """Accept a ViewGraph, an interchange dict or a path; return a validated ViewGraph.

    Raises:
        io.InputError: unreadable or inconsistent input.
    """
    if isinstance(graph, (str, Path)):
        graph = io.read_view_graph(graph)
    elif isinstance(graph, dict):
        graph = io.view_graph_from_dict(graph)
    elif not isinstance(graph, ViewGraph):
        raise io.InputError(f"expected a ViewGraph, dict or path, got {type(graph).__name__}")
    problems = validate(graph)
    if problems:
        raise io.InputError("invalid view graph: " + "; ".join(problems[:10]))
    return largest_connected_component(graph) if largest_component else graph


def check_rotations(rotations, graph: ViewGraph) -> dict:
    missing = [i for i in graph.images if i not in rotations]
    if missing:
        raise io.InputError(f"no rotation for {len(missing)} images, e.g. {missing[:5]}")
    return rotations


class RotationAverager(BaseEstimator):
    """Decoupled rotation averaging: images, then rig slots, then units."""

    def __init__(self, sigma_deg=5.0, l1_iterations=5, irls_max_iter=100, irls_tol_deg=1e-3):
        self.sigma_deg = sigma_deg
        self.l1_iterations = l1_iterations
        self.irls_max_iter = irls_max_iter
        self.irls_tol_deg = irls_tol_deg

    def fit(self, graph, y=None):
        g = check_view_graph(graph, largest_component=True)
        opts = RotationOptions(self.sigma_deg, self.l1_iterations, irls_max_iter=self.irls_max_iter,
                               irls_tol_deg=self.irls_tol_deg)
        res = decoupled_rotation_averaging(g, opts)
        self.graph_ = g
        self.rotations_ = res.camera_rotations
        self.image_rotations_ = res.image_rotations
        self.unit_rotations_ = res.unit_rotations
        self.rig_rotations_ = res.rig_rotations
        self.report_ = res.report
        return self


class TranslationAverager(BaseEstimator):
    """Unit positions, internal translations and points from known rotations."""

    def __init__(self, variant="hybrid_nonbilinear", cauchy_scale=0.03, max_track_length=50, min_angle_deg=1.0,
                 max_iterations=100, admm_rho=1.0, seed=0):
        self.variant = variant
        self.cauchy_scale = cauchy_scale
        self.max_track_length = max_track_length
        self.min_angle_deg = min_angle_deg
        self.max_iterations = max_iterations
        self.admm_rho = admm_rho
        self.seed = seed

    def fit(self, graph, rotations):
        """``rotations`` maps image id to global camera rotation."""
        g = check_view_graph(graph, largest_component=True)
        rotations = check_rotations(rotations, g)
        opts = TranslationOptions(cauchy_scale=self.cauchy_scale, admm=AdmmOptions(rho=self.admm_rho),
                                  lm=LMOptions(max_iter=self.max_iterations, fn_tol=1e-9),
                                  max_track_length=self.max_track_length,
                                  min_triangulation_angle_deg=self.min_angle_deg, seed=self.seed)
        res = average_translations(g, rotations, self.variant, opts)
        self.unit_positions_ = res.unit_position
        self.internal_translations_ = res.internal_translation
        self.points_ = res.points
        self.reports_ = res.reports
        return self


class RigBundleAdjuster(BaseEstimator):
    """Two-round multi-camera bundle adjustment of an existing reconstruction."""

    def __init__(self, huber_px=2.0, max_px_filter=8.0, max_iterations=50, refine_intrinsics=False):
        self.huber_px = huber_px
        self.max_px_filter = max_px_filter
        self.max_iterations = max_iterations
        self.refine_intrinsics = refine_intrinsics

    def fit(self, graph, state: ReconstructionState):
        g = check_view_graph(graph)
        if not isinstance(state, ReconstructionState):
            raise io.InputError("state must be a ReconstructionState")
        opts = BaOptions(huber_scale=self.huber_px, max_px_filter=self.max_px_filter,
                         max_iterations=self.max_iterations, refine_intrinsics=self.refine_intrinsics)
        obs = observations_from_graph(g, state)
        self.reconstruction_, self.observations_, self.reports_ = bundle_adjust(
            state, obs, opts, min(state.unit_position), min(state.rig.internal_rotation)
        )
        return self


class GlobalRigSfM(BaseEstimator):
    """The whole pipeline as one estimator.

    ``fit(graph)`` reconstructs; ``score(graph, truth)`` is the negated
    median position error after similarity alignment (higher is better).
    """

    def __init__(self, rotation_sigma_deg=5.0, translation_variant="hybrid_nonbilinear", cauchy_scale=0.03,
                 huber_px=2.0, max_px_filter=8.0, skip_stages=(), seed=0, threads=0):
        self.rotation_sigma_deg = rotation_sigma_deg
        self.translation_variant = translation_variant
        self.cauchy_scale = cauchy_scale
        self.huber_px = huber_px
        self.max_px_filter = max_px_filter
        self.skip_stages = skip_stages
        self.seed = seed
        self.threads = threads

    def to_config(self) -> PipelineConfig:
        return PipelineConfig({
            "rotation.sigma_deg": self.rotation_sigma_deg,
            "translation.variant": self.translation_variant,
            "translation.cauchy_scale": self.cauchy_scale,
            "ba.huber_px": self.huber_px,
            "ba.max_px_filter": self.max_px_filter,
            "stages.skip": list(self.skip_stages),
            "seed": self.seed,
            "threads": self.threads,
        })

    def fit(self, graph, y=None):
        g = check_view_graph(graph)
        res = solve(g, self.to_config())
        self.reconstruction_ = res.state
        self.graph_ = res.graph
        self.reports_ = res.reports
        self.final_stage_ = res.last_stage
        return self

    def predict(self, image_ids=None) -> dict:
        """Camera poses ``{image_id: (R, c)}`` of the fitted reconstruction."""
        check_is_fitted(self, "reconstruction_")
        poses = self.reconstruction_.camera_poses()
        if image_ids is None:
            return poses
        return {i: poses[i] for i in image_ids if i in poses}

    def score(self, graph, truth: ReconstructionState) -> float:
        check_is_fitted(self, "reconstruction_")
        return -pose_errors(self.reconstruction_, truth, strict=False).median_position
