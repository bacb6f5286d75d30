"""Decoupled rotation averaging for multi-camera rigs.

Single-camera averaging gives per-image rotations, from which each slot's
internal rotation is fused by a geodesic median across units. With the rig
fixed, every image pair becomes a unit-to-unit measurement and the unit
rotations are averaged on the quotient graph.

Averaging itself is the usual two-phase scheme: spanning-tree propagation,
a few L1 passes in the tangent space, then Cauchy-weighted IRLS. Updates are
applied in the world frame, ``R_i <- R_i exp(d_i)``, which makes the
linearized relation ``log(R_j.T R_ij R_i) ~ d_j - d_i`` exact in structure.
"""

from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import so3
from .scene import (
    DisconnectedGraphError,
    ImageNode,
    ViewGraph,
    connected_components,
    maximum_spanning_tree,
    unit_quotient_graph,
)

log = logging.getLogger(__name__)


@dataclass
class RotationOptions:
    sigma_deg: float = 5.0
    l1_iterations: int = 5
    l1_inner_iterations: int = 20
    irls_max_iter: int = 100
    irls_tol_deg: float = 1e-3


def _incidence(n: int, ei: np.ndarray, ej: np.ndarray, anchor: int) -> sp.csr_matrix:
    """Rows ``3e..3e+2`` hold ``+I`` at node j and ``-I`` at node i; anchor column removed."""
    col = np.full(n, -1)
    free = np.array([k for k in range(n) if k != anchor], dtype=np.int64)
    col[free] = np.arange(len(free))
    rows, cols, vals = [], [], []
    for node, sign in ((ej, 1.0), (ei, -1.0)):
        keep = col[node] >= 0
        e = np.flatnonzero(keep)
        for a in range(3):
            rows.append(3 * e + a)
            cols.append(3 * col[node[keep]] + a)
            vals.append(np.full(len(e), sign))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(3 * len(ei), 3 * (n - 1))
    )


def _solve_weighted(A: sp.csr_matrix, w: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    AtW = A.T.multiply(w).tocsr()
    H = (AtW @ A + 1e-12 * sp.identity(A.shape[1])).tocsc()
    return spla.splu(H, permc_spec="MMD_AT_PLUS_A").solve(AtW @ rhs)


def _relative_errors(R, ei, ej, Rij) -> np.ndarray:
    return so3.log(np.swapaxes(R[ej], 1, 2) @ Rij @ R[ei])


def _apply(R, delta, anchor):
    full = np.insert(delta.reshape(-1, 3), anchor, 0.0, axis=0)
    return R @ so3.exp(full), full


def refine_rotations(R0, ei, ej, Rij, anchor: int, options: RotationOptions | None = None):
    """L1 then IRLS refinement of absolute rotations from relative ones.

    Args:
        R0: ``(n, 3, 3)`` initial rotations, ``R0[anchor]`` is kept fixed.
        ei, ej: edge endpoints as node indices.
        Rij: ``(E, 3, 3)`` measurements of ``R_j R_i.T``.

    Returns:
        ``(rotations, info)`` where ``info`` counts iterations per phase.
    """
    opts = options or RotationOptions()
    R = np.array(R0, dtype=float)
    n = len(R)
    if n == 1 or len(ei) == 0:
        return R, {"l1_iterations": 0, "irls_iterations": 0}
    A = _incidence(n, ei, ej, anchor)

    for _ in range(opts.l1_iterations):
        omega = _relative_errors(R, ei, ej, Rij).ravel()
        delta = np.zeros(A.shape[1])
        for _ in range(opts.l1_inner_iterations):
            w = 1.0 / np.maximum(np.abs(omega - A @ delta), 1e-5)
            new = _solve_weighted(A, w, omega)
            change = np.abs(new - delta).max()
            delta = new
            if change < 1e-10:
                break
        R, _ = _apply(R, delta, anchor)

    sigma = np.deg2rad(opts.sigma_deg)
    tol = np.deg2rad(opts.irls_tol_deg)
    it = 0
    for it in range(1, opts.irls_max_iter + 1):
        omega = _relative_errors(R, ei, ej, Rij)
        sq = np.einsum("ij,ij->i", omega, omega)
        w = np.repeat(1.0 / (1.0 + sq / (sigma * sigma)), 3)
        delta = _solve_weighted(A, w, omega.ravel())
        R, full = _apply(R, delta, anchor)
        if np.linalg.norm(full, axis=1).max() < tol:
            break
    R[anchor] = np.eye(3)
    return R, {"l1_iterations": opts.l1_iterations, "irls_iterations": it}


def _propagate(n: int, tree: list[tuple[int, int, np.ndarray]], anchor: int) -> np.ndarray:
    """Absolute rotations along a tree of ``(a, b, R_ab)`` with ``R_b = R_ab R_a``."""
    adj = defaultdict(list)
    for a, b, r in tree:
        adj[a].append((b, r))
        adj[b].append((a, r.T))
    R = np.zeros((n, 3, 3))
    R[anchor] = np.eye(3)
    seen = {anchor}
    queue = deque([anchor])
    while queue:
        a = queue.popleft()
        for b, r in sorted(adj[a], key=lambda t: t[0]):
            if b not in seen:
                R[b] = r @ R[a]
                seen.add(b)
                queue.append(b)
    if len(seen) != n:
        raise DisconnectedGraphError([sorted(seen), sorted(set(range(n)) - seen)])
    return R


def _canonical_edges(edges, index):
    """Orient edges low-to-high node index and sort; returns arrays."""
    rows = []
    for k, (i, j, r, w) in enumerate(edges):
        a, b = index[i], index[j]
        if a == b:
            continue
        if a > b:
            a, b, r = b, a, r.T
        rows.append((a, b, k, r, w))
    rows.sort(key=lambda t: (t[0], t[1], t[2]))
    ei = np.array([t[0] for t in rows], dtype=np.int64)
    ej = np.array([t[1] for t in rows], dtype=np.int64)
    Rij = np.array([t[3] for t in rows]).reshape(-1, 3, 3)
    wts = [t[4] for t in rows]
    return ei, ej, Rij, wts


def average_rotations(edges, nodes, anchor=None, options: RotationOptions | None = None) -> dict:
    """Absolute rotations from ``(i, j, R_ij, inliers)`` measurements.

    The tree initialization follows the maximum spanning tree on inlier
    counts. ``anchor`` (default: smallest node id) is held at identity.

    Raises:
        DisconnectedGraphError: if the edges do not connect ``nodes``.
    """
    nodes = sorted(nodes)
    index = {v: k for k, v in enumerate(nodes)}
    anchor = nodes[0] if anchor is None else anchor
    edges = [e for e in edges if e[0] in index and e[1] in index]
    ei, ej, Rij, wts = _canonical_edges(edges, index)
    tree = maximum_spanning_tree(range(len(nodes)), [(a, b, w) for a, b, w in zip(ei, ej, wts)])
    by_pair = {(a, b): r for a, b, r in zip(ei, ej, Rij)}
    R0 = _propagate(len(nodes), [(a, b, by_pair[(a, b)]) for a, b, _ in tree], index[anchor])
    R, _ = refine_rotations(R0, ei, ej, Rij, index[anchor], options)
    return {v: R[k] for v, k in index.items()}


def graph_edges(graph: ViewGraph):
    return [(e.i, e.j, e.rotation, e.num_inliers) for e in graph.edges]


def image_components(graph: ViewGraph) -> list[list[int]]:
    return connected_components(graph.image_ids, [(e.i, e.j) for e in graph.edges])


def average_image_rotations(graph: ViewGraph, options: RotationOptions | None = None):
    """Single-camera averaging per image-level component.

    Returns ``(rotations, component_of)``; rotations from different
    components live in unrelated gauges.
    """
    rotations, component = {}, {}
    edges = graph_edges(graph)
    for label, comp in enumerate(image_components(graph)):
        keep = set(comp)
        sub = [e for e in edges if e[0] in keep]
        rotations.update(average_rotations(sub, comp, comp[0], options))
        component.update({i: label for i in comp})
    return rotations, component


def estimate_internal_rotations(global_rotations: dict, nodes: dict[int, ImageNode], component: dict | None = None) -> dict:
    """Per-slot internal rotation as the geodesic median over units.

    Each unit holding both slot ``s`` and the reference slot (lowest id)
    offers ``R_s R_ref.T``. Slots never seen together with the reference are
    reached through a co-occurrence spanning tree over slots. Only images of
    the same ``component`` (same rotation gauge) are paired.
    """
    by_unit = defaultdict(dict)
    for iid, r in global_rotations.items():
        n = nodes[iid]
        by_unit[n.unit_id][n.slot_id] = (r, component.get(iid, 0) if component else 0)
    slots = sorted({nodes[i].slot_id for i in global_rotations})
    if not slots:
        raise ValueError("no rotations given")
    ref = min(n.slot_id for n in nodes.values())
    if ref not in slots:
        raise ValueError(f"reference slot {ref} has no estimated rotation in any unit")

    pairs = defaultdict(list)
    for members in by_unit.values():
        ids = sorted(members)
        for x in range(len(ids)):
            for y in range(x + 1, len(ids)):
                a, b = ids[x], ids[y]
                (ra, ca), (rb, cb) = members[a], members[b]
                if ca == cb:
                    pairs[(a, b)].append(rb @ ra.T)

    def relative(a, b):
        """Median of R_b R_a.T."""
        if a < b:
            return so3.geodesic_median(pairs[(a, b)])
        return so3.geodesic_median(pairs[(b, a)]).T

    rig = {ref: np.eye(3)}
    direct = [s for s in slots if s != ref and pairs.get((min(s, ref), max(s, ref)))]
    for s in direct:
        rig[s] = relative(ref, s)

    missing = [s for s in slots if s not in rig]
    if missing:
        weights = [(a, b, len(v)) for (a, b), v in pairs.items() if v]
        comps = connected_components(slots, [(a, b) for a, b, _ in weights])
        home = next(c for c in comps if ref in c)
        lost = [s for s in missing if s not in home]
        if lost:
            raise ValueError(f"slot(s) {lost} never share a unit with the reference slot {ref}, directly or through other slots")
        tree = maximum_spanning_tree(home, [w for w in weights if w[0] in home])
        adj = defaultdict(list)
        for a, b, _ in tree:
            adj[a].append(b)
            adj[b].append(a)
        chained = {ref: np.eye(3)}
        queue = deque([ref])
        while queue:
            a = queue.popleft()
            for b in sorted(adj[a]):
                if b not in chained:
                    chained[b] = relative(a, b) @ chained[a]
                    queue.append(b)
        for s in missing:
            rig[s] = chained[s]
    return dict(sorted(rig.items()))


def unit_measurements(graph: ViewGraph, rig: dict):
    """Unit-level ``(a, b, R^g_ab, inliers)`` from every inter-unit image edge."""
    out = []
    for e in graph.edges:
        ni, nj = graph.images[e.i], graph.images[e.j]
        if ni.unit_id == nj.unit_id:
            continue
        if ni.slot_id not in rig or nj.slot_id not in rig:
            continue
        r = rig[nj.slot_id].T @ e.rotation @ rig[ni.slot_id]
        out.append((ni.unit_id, nj.unit_id, r, e.num_inliers))
    return out


def average_unit_rotations(graph: ViewGraph, rig: dict, anchor_unit=None, options: RotationOptions | None = None) -> dict:
    """Unit rotations from all image pairs with the rig rotations held fixed.

    Parallel measurements between one unit pair are all kept as residuals.
    The initialization tree maximizes the summed inlier count between units;
    each tree edge is seeded with the median of its parallel measurements.
    """
    units = graph.unit_ids
    index = {u: k for k, u in enumerate(units)}
    anchor_unit = units[0] if anchor_unit is None else anchor_unit
    ei, ej, Rij, _ = _canonical_edges(unit_measurements(graph, rig), index)

    q = unit_quotient_graph(graph)
    tree = maximum_spanning_tree(units, [(a, b, w) for (a, b), w in q.weights.items()])
    parallel = defaultdict(list)
    for a, b, r in zip(ei, ej, Rij):
        parallel[(a, b)].append(r)
    seeds = []
    for a, b, _ in tree:
        ka, kb = index[a], index[b]
        if not parallel[(ka, kb)]:
            raise DisconnectedGraphError([[a], [b]])
        seeds.append((ka, kb, so3.geodesic_median(parallel[(ka, kb)])))
    R0 = _propagate(len(units), seeds, index[anchor_unit])
    R, _ = refine_rotations(R0, ei, ej, Rij, index[anchor_unit], options)
    return {u: R[k] for u, k in index.items()}


def compose_camera_rotations(rig: dict, units: dict, nodes: dict[int, ImageNode]) -> dict:
    """``R_i = R^r_slot R^g_unit`` for every image."""
    out = {}
    for iid, n in nodes.items():
        if n.slot_id not in rig:
            raise KeyError(f"no internal rotation for slot {n.slot_id} (image {iid})")
        if n.unit_id not in units:
            raise KeyError(f"no rotation for unit {n.unit_id} (image {iid})")
        r = rig[n.slot_id] @ units[n.unit_id]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-13:
            r = so3.project_to_so3(r)
        out[iid] = r
    return out


@dataclass
class RotationResult:
    image_rotations: dict
    rig_rotations: dict
    unit_rotations: dict
    camera_rotations: dict
    report: dict


def decoupled_rotation_averaging(graph: ViewGraph, options: RotationOptions | None = None) -> RotationResult:
    """Image rotations -> rig rotations -> unit rotations -> camera rotations."""
    opts = options or RotationOptions()
    image_rot, component = average_image_rotations(graph, opts)
    rig = estimate_internal_rotations(image_rot, graph.images, component)
    units = average_unit_rotations(graph, rig, graph.anchor_unit, opts)
    cams = compose_camera_rotations(rig, units, graph.images)
    report = {
        "image_components": len(set(component.values())),
        "num_edges": len(graph.edges),
        "num_unit_measurements": len(unit_measurements(graph, rig)),
        "slots": sorted(rig),
    }
    return RotationResult(image_rot, rig, units, cams, report)
