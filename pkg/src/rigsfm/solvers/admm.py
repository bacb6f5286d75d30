"""ADMM for sparse L1 problems with optional lower-bounded scale unknowns.

Solves::

    minimize  sum_r | A_r x + s_r b_r - d_r |_1     subject to  s_r >= 1

by splitting ``e = A x + B s - d`` (soft-thresholded) and ``w = s``
(clamped to ``[1, inf)``). Both splittings share one penalty, so the
quadratic update matrix does not depend on ``rho`` and is factorized once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SingularSystemError(ValueError):
    def __init__(self, variables):
        self.variables = list(variables)
        super().__init__(f"normal equations are singular; under-constrained variables: {self.variables[:20]}")


@dataclass
class AdmmL1Problem:
    """``A`` is ``(rows, n_x)`` sparse; ``b`` is ``(rows, n_s)`` sparse (one column per scale)."""

    A: sp.spmatrix
    d: np.ndarray
    b: sp.spmatrix | None = None
    x0: np.ndarray | None = None
    scale_lower: float = 1.0
    variable_names: list | None = None

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A)
        self.d = np.asarray(self.d, dtype=float)
        if self.b is None:
            self.b = sp.csr_matrix((self.A.shape[0], 0))
        self.b = sp.csr_matrix(self.b)
        if self.b.shape[0] != self.A.shape[0] or self.d.shape != (self.A.shape[0],):
            raise ValueError("A, b and d must have the same number of rows")

    @property
    def n_x(self) -> int:
        return self.A.shape[1]

    @property
    def n_s(self) -> int:
        return self.b.shape[1]

    def objective(self, x: np.ndarray, s: np.ndarray | None = None) -> float:
        s = np.ones(self.n_s) if s is None else s
        return float(np.abs(self.A @ x + self.b @ s - self.d).sum())


@dataclass
class AdmmOptions:
    rho: float = 1.0
    max_iter: int = 1000
    primal_tol: float = 1e-8
    dual_tol: float = 1e-8
    balance_ratio: float = 10.0


@dataclass
class AdmmResult:
    solution: np.ndarray
    scales: np.ndarray
    converged: bool
    iterations: int
    objective: float
    residual_history: list = field(default_factory=list)
    polished: bool = False


def admm_l1(problem: AdmmL1Problem, options: AdmmOptions | None = None, allow_singular: bool = False,
            polish: bool = True) -> AdmmResult:
    """Solve ``problem``; see the module docstring for the splitting.

    Raises:
        SingularSystemError: some variables are not determined by the
            residuals (no residual touches them, or the normal equations are
            rank deficient along them). With ``allow_singular`` a 1e-10 ridge
            keeps such variables near their initial values instead; callers
            then filter the affected unknowns themselves.

    With ``polish`` the final iterate is snapped onto its active set (see
    ``_polish``), which is exact whenever ADMM has identified that set.
    """
    opts = options or AdmmOptions()
    A, b, d = problem.A, problem.b, problem.d
    n_x, n_s = problem.n_x, problem.n_s
    M = sp.hstack([A, b]).tocsr()
    S = sp.hstack([sp.csr_matrix((n_s, n_x)), sp.identity(n_s, format="csr")]).tocsr()
    names = problem.variable_names or list(range(n_x))

    G = (M.T @ M + S.T @ S).tocsc()
    K = (G + 1e-10 * sp.identity(n_x + n_s)).tocsc()
    try:
        lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SingularSystemError(names) from exc
    if not allow_singular:
        # pivots at the ridge level mark directions the residuals do not fix
        piv = np.abs(lu.U.diagonal())
        scale = max(float(np.abs(G.diagonal()).max(initial=0.0)), 1.0)
        weak = np.sort(lu.perm_c[np.flatnonzero(piv < 1e-8 * scale)])
        weak = weak[weak < n_x]
        if len(weak):
            raise SingularSystemError([names[i] for i in weak])

    x0 = np.zeros(n_x) if problem.x0 is None else np.asarray(problem.x0, dtype=float).copy()
    z = np.concatenate([x0, np.full(n_s, max(problem.scale_lower, 1.0))])
    if not np.all(np.isfinite(lu.solve(M.T @ (M @ z)))):
        raise SingularSystemError(problem.variable_names or list(range(n_x)))

    rho = opts.rho
    e = M @ z - d
    w = z[n_x:].copy()
    u = np.zeros_like(e)
    v = np.zeros(n_s)

    def objective_at(zz, ww):
        return float(np.abs(A @ zz[:n_x] + b @ ww - d).sum())

    best = (objective_at(z, w), z.copy(), w.copy())
    history = []
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        rhs = M.T @ (e + d - u) + S.T @ (w - v)
        z = lu.solve(rhs)
        Mz = M @ z
        Sz = z[n_x:]
        e_old, w_old = e, w
        q = Mz - d + u
        e = np.sign(q) * np.maximum(np.abs(q) - 1.0 / rho, 0.0)
        w = np.maximum(Sz + v, problem.scale_lower)
        r_e = Mz - e - d
        r_w = Sz - w
        u = u + r_e
        v = v + r_w
        primal = float(np.sqrt(r_e @ r_e + r_w @ r_w))
        dual = float(rho * np.linalg.norm(M.T @ (e - e_old) + S.T @ (w - w_old)))
        history.append((primal, dual))

        obj = objective_at(z, w)
        if obj < best[0]:
            best = (obj, z.copy(), w.copy())
        if primal <= opts.primal_tol and dual <= opts.dual_tol:
            converged = True
            break
        # adapt rarely and never late: a drifting rho voids the convergence guarantee
        if it % 20 or it > opts.max_iter // 2:
            continue
        if primal > opts.balance_ratio * dual:
            rho *= 2.0
            u /= 2.0
            v /= 2.0
        elif dual > opts.balance_ratio * primal:
            rho /= 2.0
            u *= 2.0
            v *= 2.0

    if converged:
        obj, zz, ww = objective_at(z, w), z, w
    else:
        obj, zz, ww = best
        log.debug("ADMM stopped after %d iterations without meeting tolerances", it)
    polished = False
    if polish:
        zz, ww, obj, polished = _polish(problem, M, zz, ww, obj)
    return AdmmResult(zz[:n_x].copy(), ww.copy(), converged, it, obj, history, polished)


def _polish(problem, M, z, w, obj, rel_tols=(1e-8, 1e-6, 1e-4, 1e-2, 1e-1, 1.0)):
    """Solve the rows and bounds that look active at ``z`` exactly.

    ADMM approaches an L1 vertex slowly, most visibly when the optimum is
    zero. The vertex is where the active rows vanish and the active scales sit
    on their bound, so one least-squares solve on that set lands on it. The
    set is guessed with a few thresholds; a guess is kept, with its scales
    clamped onto the feasible set, only if it lowers the objective.
    """
    n_x, n_s, lower = problem.n_x, problem.n_s, problem.scale_lower
    zw = np.concatenate([z[:n_x], w])
    homogeneous = n_s > 0 and lower > 0 and not np.any(problem.d)
    weight = np.sqrt(max(1.0, float(abs(M.multiply(M).sum(axis=0)).max())))
    if homogeneous and w.min() > lower:
        # homogeneous problem: shrinking toward the bound never raises the cost
        zw *= lower / w.min()
        obj = problem.objective(zw[:n_x], zw[n_x:])
    best = (obj, zw, False)
    size = max(1.0, float(np.abs(problem.d).max(initial=0.0)), float(np.abs(zw).max(initial=0.0)))
    r = np.abs(M @ zw - problem.d)
    bound_sets = [np.flatnonzero(zw[n_x:] <= lower + min(rel, 1e-2) * max(lower, 1.0)) for rel in rel_tols]
    if n_s:
        # too many pinned scales over-determine the system; one is enough to fix the scale
        bound_sets.append(np.argmin(zw[n_x:])[None])
    for rel in rel_tols:
        rows = np.flatnonzero(r <= rel * size)
        for at_bound in {tuple(b) for b in bound_sets}:
            at_bound = np.array(at_bound, dtype=int)
            if len(rows) + len(at_bound) < n_x + n_s:
                continue
            Ma = M[rows]
            # bounds weighted like the heaviest column, so they hold as constraints
            Sa = sp.csr_matrix((np.full(len(at_bound), weight), (np.arange(len(at_bound)), n_x + at_bound)),
                               shape=(len(at_bound), n_x + n_s))
            N = (Ma.T @ Ma + Sa.T @ Sa).tocsc()
            try:
                # no ridge: it biases the weakly fixed scale direction
                cand = spla.splu(N).solve(Ma.T @ problem.d[rows] + Sa.T @ np.full(len(at_bound), weight * lower))
            except RuntimeError:
                continue
            if not np.all(np.isfinite(cand)):
                continue
            if homogeneous and cand[n_x:].min() > 0:
                cand *= lower / cand[n_x:].min()
            cand[n_x:] = np.maximum(cand[n_x:], lower)
            c_obj = problem.objective(cand[:n_x], cand[n_x:])
            if c_obj < best[0]:
                best = (c_obj, cand, True)
    obj, zw, polished = best
    return zw, zw[n_x:].copy(), obj, polished
