"""View-graph and reconstruction data model, plus the graph algorithms
(connectivity, maximum spanning trees, unit quotient graph) built on it."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple

import numpy as np

from . import so3


class DisconnectedGraphError(ValueError):
    """Raised when an operation needs a connected graph."""

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        summary = "; ".join(f"{{{', '.join(map(str, c[:8]))}{', ...' if len(c) > 8 else ''}}}" for c in self.components)
        super().__init__(f"graph has {len(self.components)} connected components: {summary}")


@dataclass(frozen=True)
class ImageNode:
    image_id: int
    unit_id: int
    slot_id: int
    intrinsics_id: int = 0


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera without distortion."""

    focal: float
    cx: float
    cy: float
    width: float
    height: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])

    def bearing(self, pixels) -> np.ndarray:
        """Unit rays in the camera frame for ``(..., 2)`` pixels."""
        pixels = np.asarray(pixels, dtype=float)
        rays = np.stack(
            [(pixels[..., 0] - self.cx) / self.focal, (pixels[..., 1] - self.cy) / self.focal, np.ones(pixels.shape[:-1])],
            axis=-1,
        )
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)

    def project(self, points_cam) -> np.ndarray:
        p = np.asarray(points_cam, dtype=float)
        return np.stack([self.focal * p[..., 0] / p[..., 2] + self.cx, self.focal * p[..., 1] / p[..., 2] + self.cy], axis=-1)


@dataclass(frozen=True, eq=False)
class RelativePoseEdge:
    """Two-view geometry between images ``i`` and ``j``.

    ``rotation`` maps camera-i coordinates to camera-j coordinates and
    ``translation`` is the unit direction with ``R_j.T @ t == (c_i - c_j) / |c_i - c_j|``.
    The rotation is stored as the quaternion it was read or built from so
    that files round-trip bit-exactly.
    """

    i: int
    j: int
    quaternion: np.ndarray
    translation: np.ndarray
    num_inliers: int

    @classmethod
    def from_matrix(cls, i, j, rotation, translation, num_inliers) -> "RelativePoseEdge":
        return cls(int(i), int(j), so3.to_quaternion(rotation), np.asarray(translation, dtype=float), int(num_inliers))

    @cached_property
    def rotation(self) -> np.ndarray:
        return so3.from_quaternion(self.quaternion)

    @property
    def key(self) -> tuple[int, int]:
        return (min(self.i, self.j), max(self.i, self.j))


@dataclass(frozen=True, eq=False)
class TrackObservation:
    image_id: int
    pixel: np.ndarray | None = None
    bearing: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class Track:
    point_id: int
    observations: tuple[TrackObservation, ...]


@dataclass(frozen=True, eq=False)
class ViewGraph:
    images: dict[int, ImageNode]
    edges: tuple[RelativePoseEdge, ...] = ()
    tracks: tuple[Track, ...] = ()
    intrinsics: dict[int, Intrinsics] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "images", dict(sorted(self.images.items())))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "tracks", tuple(self.tracks))

    @property
    def image_ids(self) -> list[int]:
        return list(self.images)

    @property
    def unit_ids(self) -> list[int]:
        return sorted({n.unit_id for n in self.images.values()})

    @property
    def slot_ids(self) -> list[int]:
        return sorted({n.slot_id for n in self.images.values()})

    @property
    def reference_slot(self) -> int:
        return self.slot_ids[0]

    @property
    def anchor_unit(self) -> int:
        return self.unit_ids[0]

    def image_at(self, unit_id: int, slot_id: int) -> int | None:
        return self._unit_slot_index.get((unit_id, slot_id))

    @cached_property
    def _unit_slot_index(self) -> dict[tuple[int, int], int]:
        return {(n.unit_id, n.slot_id): n.image_id for n in self.images.values()}

    def bearing(self, obs: TrackObservation) -> np.ndarray:
        """Unit camera-frame ray of an observation; bearings win over pixels."""
        if obs.bearing is not None:
            b = np.asarray(obs.bearing, dtype=float)
            return b / np.linalg.norm(b)
        node = self.images[obs.image_id]
        return self.intrinsics[node.intrinsics_id].bearing(obs.pixel)

    def subgraph(self, image_ids: Iterable[int]) -> "ViewGraph":
        """Induced subgraph; tracks keep only surviving observations."""
        keep = set(image_ids)
        edges = [e for e in self.edges if e.i in keep and e.j in keep]
        tracks = []
        for t in self.tracks:
            obs = tuple(o for o in t.observations if o.image_id in keep)
            if len(obs) >= 2:
                tracks.append(Track(t.point_id, obs))
        images = {k: v for k, v in self.images.items() if k in keep}
        used = {n.intrinsics_id for n in images.values()}
        intr = {k: v for k, v in self.intrinsics.items() if k in used}
        return ViewGraph(images, tuple(edges), tuple(tracks), intr)


@dataclass
class RigCalibration:
    """Per-slot internal pose: camera = R^r (rig frame) + t^r."""

    internal_rotation: dict[int, np.ndarray]
    internal_translation: dict[int, np.ndarray]

    @classmethod
    def identity(cls, slot_ids) -> "RigCalibration":
        return cls({s: np.eye(3) for s in slot_ids}, {s: np.zeros(3) for s in slot_ids})


@dataclass
class ReconstructionState:
    """Unit poses, rig calibration and points.

    Per-image poses follow ``R_i = R^r R^g`` and ``c_i = c^g - R_i.T t^r``.
    """

    images: dict[int, ImageNode]
    unit_rotation: dict[int, np.ndarray]
    unit_position: dict[int, np.ndarray]
    rig: RigCalibration
    points: dict[int, np.ndarray] = field(default_factory=dict)
    intrinsics: dict[int, Intrinsics] = field(default_factory=dict)

    def camera_rotation(self, image_id: int) -> np.ndarray:
        n = self.images[image_id]
        return self.rig.internal_rotation[n.slot_id] @ self.unit_rotation[n.unit_id]

    def camera_center(self, image_id: int) -> np.ndarray:
        n = self.images[image_id]
        r = self.camera_rotation(image_id)
        return self.unit_position[n.unit_id] - r.T @ self.rig.internal_translation[n.slot_id]

    def camera_poses(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        return {
            i: (self.camera_rotation(i), self.camera_center(i))
            for i, n in self.images.items()
            if n.unit_id in self.unit_rotation and n.slot_id in self.rig.internal_rotation
        }

    def copy(self) -> "ReconstructionState":
        return ReconstructionState(
            dict(self.images),
            {k: v.copy() for k, v in self.unit_rotation.items()},
            {k: v.copy() for k, v in self.unit_position.items()},
            RigCalibration(
                {k: v.copy() for k, v in self.rig.internal_rotation.items()},
                {k: v.copy() for k, v in self.rig.internal_translation.items()},
            ),
            {k: v.copy() for k, v in self.points.items()},
            dict(self.intrinsics),
        )


def validate(graph: ViewGraph) -> list[str]:
    """Human-readable list of broken invariants; empty when the graph is sound."""
    out = []
    seen_pairs: dict[tuple[int, int], int] = {}
    slot_intr: dict[int, int] = {}
    for iid, n in graph.images.items():
        if iid != n.image_id:
            out.append(f"image {iid}: key does not match image_id {n.image_id}")
        key = (n.unit_id, n.slot_id)
        if key in seen_pairs:
            out.append(f"image {iid}: (unit {n.unit_id}, slot {n.slot_id}) already used by image {seen_pairs[key]}")
        seen_pairs[key] = iid
        prev = slot_intr.setdefault(n.slot_id, n.intrinsics_id)
        if prev != n.intrinsics_id:
            out.append(f"slot {n.slot_id}: maps to intrinsics {prev} and {n.intrinsics_id}")

    for k, intr in graph.intrinsics.items():
        if not intr.focal > 0:
            out.append(f"intrinsics {k}: focal must be positive, got {intr.focal}")
        if not (0 <= intr.cx <= intr.width and 0 <= intr.cy <= intr.height):
            out.append(f"intrinsics {k}: principal point ({intr.cx}, {intr.cy}) outside image")

    pairs = set()
    for e in graph.edges:
        tag = f"edge ({e.i}, {e.j})"
        if e.i == e.j:
            out.append(f"{tag}: self-loop")
        for end in (e.i, e.j):
            if end not in graph.images:
                out.append(f"{tag}: unknown image {end}")
        if e.key in pairs:
            out.append(f"{tag}: duplicate edge")
        pairs.add(e.key)
        tn = float(np.linalg.norm(e.translation))
        if abs(tn - 1.0) > 1e-9:
            out.append(f"{tag}: translation norm {tn:.6g} is not 1")
        qn = float(np.linalg.norm(e.quaternion))
        if not np.isfinite(qn) or abs(qn - 1.0) > 1e-9:
            out.append(f"{tag}: quaternion norm {qn:.6g} is not 1")
        if e.num_inliers < 0:
            out.append(f"{tag}: negative inlier count")

    for t in graph.tracks:
        tag = f"track {t.point_id}"
        if len(t.observations) < 2:
            out.append(f"{tag}: has {len(t.observations)} observation(s), needs at least 2")
        ids = [o.image_id for o in t.observations]
        if len(set(ids)) != len(ids):
            out.append(f"{tag}: more than one observation in a single image")
        for o in t.observations:
            if o.image_id not in graph.images:
                out.append(f"{tag}: unknown image {o.image_id}")
                continue
            if o.bearing is not None:
                bn = float(np.linalg.norm(o.bearing))
                if abs(bn - 1.0) > 1e-9:
                    out.append(f"{tag}: bearing in image {o.image_id} has norm {bn:.6g}")
            elif o.pixel is None:
                out.append(f"{tag}: observation in image {o.image_id} has neither pixel nor bearing")
            elif graph.images[o.image_id].intrinsics_id not in graph.intrinsics:
                out.append(f"{tag}: pixel observation in image {o.image_id} has no intrinsics")
    return out


class _DisjointSet:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        return True

    def groups(self):
        out = defaultdict(list)
        for x in self.parent:
            out[self.find(x)].append(x)
        return list(out.values())


def connected_components(nodes, pairs) -> list[list]:
    ds = _DisjointSet(nodes)
    for a, b in pairs:
        ds.union(a, b)
    return sorted((sorted(g) for g in ds.groups()), key=lambda g: g[0])


def largest_connected_component(graph: ViewGraph) -> ViewGraph:
    """Images of the largest component of the unit-level quotient graph.

    Images that share a unit are connected implicitly. Ties go to the
    component with more units, then the lowest unit id.
    """
    if not graph.images:
        raise ValueError("empty view graph")
    unit_of = {i: n.unit_id for i, n in graph.images.items()}
    pairs = [(unit_of[e.i], unit_of[e.j]) for e in graph.edges if e.i in unit_of and e.j in unit_of]
    comps = connected_components(graph.unit_ids, pairs)
    counts = defaultdict(int)
    for n in graph.images.values():
        counts[n.unit_id] += 1
    best = max(comps, key=lambda c: (sum(counts[u] for u in c), len(c), -c[0]))
    keep = set(best)
    if len(keep) == len(graph.unit_ids):
        return graph
    return graph.subgraph(i for i, n in graph.images.items() if n.unit_id in keep)


def maximum_spanning_tree(nodes, weighted_edges) -> list[tuple]:
    """Kruskal on ``(a, b, weight)`` triples.

    Ties break by the smaller ``(min, max)`` endpoint pair. Raises
    :class:`DisconnectedGraphError` if the edges do not span ``nodes``.
    """
    nodes = list(nodes)
    ds = _DisjointSet(nodes)
    order = sorted(weighted_edges, key=lambda e: (-e[2], min(e[0], e[1]), max(e[0], e[1])))
    tree = []
    for e in order:
        if ds.union(e[0], e[1]):
            tree.append(e)
            if len(tree) == len(nodes) - 1:
                break
    if len(tree) != max(len(nodes) - 1, 0):
        raise DisconnectedGraphError(ds.groups())
    return tree


def maximum_spanning_tree_images(graph: ViewGraph) -> list[RelativePoseEdge]:
    """Edges of the image-level spanning tree maximizing total inliers."""
    by_key = {e.key: e for e in graph.edges}
    tree = maximum_spanning_tree(graph.image_ids, [(e.key[0], e.key[1], e.num_inliers) for e in graph.edges])
    return [by_key[(a, b)] for a, b, _ in tree]


class UnitGraph(NamedTuple):
    units: list[int]
    weights: dict[tuple[int, int], int]


def unit_quotient_graph(graph: ViewGraph) -> UnitGraph:
    """Units as nodes; edge weight is the total inlier count between two units."""
    weights: dict[tuple[int, int], int] = defaultdict(int)
    for e in graph.edges:
        a, b = graph.images[e.i].unit_id, graph.images[e.j].unit_id
        if a == b:
            continue
        weights[(min(a, b), max(a, b))] += e.num_inliers
    return UnitGraph(graph.unit_ids, dict(sorted(weights.items())))


def maximum_spanning_tree_units(graph: ViewGraph) -> list[tuple[int, int, int]]:
    q = unit_quotient_graph(graph)
    return maximum_spanning_tree(q.units, [(a, b, w) for (a, b), w in q.weights.items()])
