"""Sparse robustified nonlinear least squares.

Residuals are registered in vectorized groups: one callable evaluates every
term of a group at once from the gathered parameter values, returning the
residuals ``(N, m)`` and one Jacobian ``(N, m, local_dim)`` per referenced
parameter block. Rotation blocks use the 3-dim local update
``R <- exp(delta) @ R``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .. import so3
from .kernels import RobustKernel

log = logging.getLogger(__name__)

_MIN_DIAGONAL = 1e-6
_MAX_DIAGONAL = 1e32
_RIDGE = 1e-10
_MAX_DAMPING = 1e32


class SolverError(RuntimeError):
    """The optimizer could not make progress from a numerically valid state."""


class ParameterGroup:
    """A homogeneous set of parameter blocks (all points, all unit rotations, ...)."""

    def __init__(self, values, manifold: str = "euclidean", constant=None, lower: float | None = None):
        values = np.array(values, dtype=float)
        if manifold == "so3":
            values = values.reshape(-1, 3, 3)
            self.local_dim = 3
        elif manifold == "euclidean":
            if values.ndim == 1:
                values = values[:, None]
            self.local_dim = values.shape[1]
        else:
            raise ValueError(f"unknown manifold {manifold!r}")
        self.values = values
        self.manifold = manifold
        self.lower = lower
        self.constant = np.zeros(len(values), dtype=bool) if constant is None else np.asarray(constant, dtype=bool).copy()
        if self.constant.shape != (len(values),):
            raise ValueError("constant mask must have one entry per block")

    def __len__(self):
        return len(self.values)

    def retract(self, values: np.ndarray, delta: np.ndarray) -> np.ndarray:
        if self.manifold == "so3":
            return so3.exp(delta) @ values
        out = values + delta
        if self.lower is not None:
            out = np.maximum(out, self.lower)
        return out


@dataclass
class ResidualGroup:
    """``fn(*gathered, jac=True) -> (residuals, [jacobian per block])``."""

    fn: Callable
    blocks: Sequence[tuple[str, np.ndarray]]
    kernel: RobustKernel = field(default_factory=RobustKernel)
    name: str = ""

    def __post_init__(self):
        self.blocks = [(g, np.asarray(ix, dtype=np.int64)) for g, ix in self.blocks]
        sizes = {len(ix) for _, ix in self.blocks}
        if len(sizes) != 1:
            raise ValueError(f"residual group {self.name!r}: block index arrays differ in length")
        self.size = sizes.pop()


class LeastSquaresProblem:
    """Parameter groups plus residual groups.

    ``eliminate`` lists groups to remove by Schur complement before the
    linear solve, first-eliminated first. A group qualifies when, after the
    earlier eliminations, no residual couples two of its blocks (points in
    bundle adjustment, per-term scale variables).
    """

    def __init__(self, eliminate=()):
        self.groups: dict[str, ParameterGroup] = {}
        self.residuals: list[ResidualGroup] = []
        self.eliminate = list(eliminate)

    def add_parameters(self, name: str, values, manifold: str = "euclidean", constant=None, lower=None) -> ParameterGroup:
        g = ParameterGroup(values, manifold, constant, lower)
        self.groups[name] = g
        return g

    def add_residuals(self, fn, blocks, kernel: RobustKernel | None = None, name: str = "") -> ResidualGroup:
        r = ResidualGroup(fn, blocks, kernel or RobustKernel(), name or f"r{len(self.residuals)}")
        for g, ix in r.blocks:
            if g not in self.groups:
                raise KeyError(f"residual group {r.name!r} references unknown parameters {g!r}")
            if len(ix) and (ix.min() < 0 or ix.max() >= len(self.groups[g])):
                raise IndexError(f"residual group {r.name!r}: index out of range for {g!r}")
        self.residuals.append(r)
        return r

    def values(self) -> dict[str, np.ndarray]:
        return {k: g.values for k, g in self.groups.items()}

    # -- evaluation -------------------------------------------------------

    def _order(self):
        elim = [g for g in self.eliminate if g in self.groups]
        return [g for g in self.groups if g not in elim] + elim[::-1]

    def _segments(self, offsets):
        """``(start, stop, block_dim)`` of each eliminated group, in elimination order."""
        out = []
        for name in self.eliminate:
            if name not in self.groups:
                continue
            off = offsets[name]
            free = off[off >= 0]
            if len(free):
                k = self.groups[name].local_dim
                out.append((int(free.min()), int(free.max()) + k, k))
        return out

    def _layout(self):
        offsets, n = {}, 0
        for name in self._order():
            g = self.groups[name]
            off = np.full(len(g), -1, dtype=np.int64)
            free = ~g.constant
            off[free] = n + g.local_dim * np.arange(free.sum())
            n += g.local_dim * int(free.sum())
            offsets[name] = off
        return offsets, n

    def gather(self, res: ResidualGroup, values: dict[str, np.ndarray]):
        return [values[g][ix] for g, ix in res.blocks]

    def cost(self, values: dict[str, np.ndarray]) -> float:
        total = 0.0
        for res in self.residuals:
            if res.size == 0:
                continue
            r, _ = res.fn(*self.gather(res, values), jac=False)
            s = np.einsum("ij,ij->i", r, r)
            total += 0.5 * float(res.kernel.rho(s).sum())
        return total

    def linearize(self, values, offsets, nvar):
        """Weighted residual vector, sparse Jacobian and robust cost."""
        rows, cols, data, rvec = [], [], [], []
        base = 0
        cost = 0.0
        for res in self.residuals:
            if res.size == 0:
                continue
            r, jacs = res.fn(*self.gather(res, values), jac=True)
            n, m = r.shape
            s = np.einsum("ij,ij->i", r, r)
            cost += 0.5 * float(res.kernel.rho(s).sum())
            sw = np.sqrt(res.kernel.weight(s))
            rvec.append((r * sw[:, None]).ravel())
            row_ix = base + np.arange(n * m).reshape(n, m)
            for (gname, ix), jk in zip(res.blocks, jacs):
                off = offsets[gname][ix]
                keep = off >= 0
                if not np.any(keep):
                    continue
                dk = jk.shape[2]
                jw = jk[keep] * sw[keep, None, None]
                rr = np.broadcast_to(row_ix[keep][:, :, None], jw.shape)
                cc = np.broadcast_to((off[keep][:, None] + np.arange(dk))[:, None, :], jw.shape)
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                data.append(jw.ravel())
            base += n * m
        if rows:
            J = sp.csr_matrix(
                (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(base, nvar)
            )
        else:
            J = sp.csr_matrix((base, nvar))
        r = np.concatenate(rvec) if rvec else np.zeros(0)
        return r, J, cost

    def retract_all(self, values, delta, offsets):
        out = {}
        for name, g in self.groups.items():
            off = offsets[name]
            free = off >= 0
            if not np.any(free):
                out[name] = values[name]
                continue
            d = delta[off[free][:, None] + np.arange(g.local_dim)]
            v = values[name].copy()
            v[free] = g.retract(values[name][free], d)
            out[name] = v
        return out


@dataclass
class LMOptions:
    max_iter: int = 100
    fn_tol: float = 1e-10
    grad_tol: float = 1e-12
    param_tol: float = 1e-12
    initial_damping: float = 1e-4


@dataclass
class LMResult:
    values: dict[str, np.ndarray]
    initial_cost: float
    final_cost: float
    iterations: int
    status: str
    cost_history: list[float]
    gradient_norm: float

    @property
    def converged(self) -> bool:
        return self.status in ("gradient_tolerance", "function_tolerance", "parameter_tolerance")


def _direct_solve(A, b):
    if A.shape[0] == 0:
        return np.zeros(0)
    if A.shape[0] <= 1500:
        return np.linalg.solve(A.toarray(), b)
    return spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(b)


def _block_diagonal_inverse(D: sp.csr_matrix, k: int):
    """Inverse of a ``k x k`` block-diagonal matrix, or None if it is not one."""
    coo = D.tocoo()
    if np.any(coo.row // k != coo.col // k):
        return None
    nb = D.shape[0] // k
    blocks = np.zeros((nb, k, k))
    np.add.at(blocks, (coo.row // k, coo.row % k, coo.col % k), coo.data)
    inv = np.linalg.inv(blocks)
    r = (np.arange(nb)[:, None, None] * k + np.arange(k)[None, :, None]).repeat(k, axis=2)
    c = (np.arange(nb)[:, None, None] * k + np.arange(k)[None, None, :]).repeat(k, axis=1)
    return sp.csr_matrix((inv.ravel(), (r.ravel(), c.ravel())), shape=D.shape)


def _schur_solve(A: sp.csr_matrix, b: np.ndarray, segments) -> np.ndarray:
    """Solve ``A x = b`` eliminating trailing block-diagonal segments."""
    if not segments:
        return _direct_solve(A, b)
    start, stop, k = segments[0]
    if stop != A.shape[0]:
        return _direct_solve(A, b)
    Dinv = _block_diagonal_inverse(A[start:, start:], k)
    if Dinv is None:
        return _direct_solve(A, b)
    Aa = A[:start, :start]
    B = A[:start, start:]
    ba, bd = b[:start], b[start:]
    BD = B @ Dinv
    xa = _schur_solve((Aa - BD @ B.T).tocsr(), ba - BD @ bd, segments[1:])
    return np.concatenate([xa, Dinv @ (bd - B.T @ xa)])


def _solve_damped(H: sp.csc_matrix, g: np.ndarray, damping: float, segments=()) -> np.ndarray:
    d = np.clip(H.diagonal(), _MIN_DIAGONAL, _MAX_DIAGONAL)
    A = (H + sp.diags(damping * d + _RIDGE)).tocsr()
    try:
        if segments:
            return _schur_solve(A, -g, list(segments))
        return spla.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(-g)
    except (np.linalg.LinAlgError, RuntimeError):
        return np.full(len(g), np.nan)


def levenberg_marquardt(problem: LeastSquaresProblem, options: LMOptions | None = None) -> LMResult:
    """Minimize ``sum_i rho(|r_i|^2) / 2`` over all non-constant blocks.

    Gauge freedoms need no explicit constraints; the damping term keeps the
    normal equations positive definite. Constant blocks are copied through
    untouched.
    """
    opts = options or LMOptions()
    offsets, nvar = problem._layout()
    segments = problem._segments(offsets)
    x = problem.values()
    r, J, cost = problem.linearize(x, offsets, nvar)
    if not np.isfinite(cost) or not np.all(np.isfinite(r)):
        raise SolverError("residuals are not finite at the initial point")
    initial = cost
    history = [cost]
    lam = opts.initial_damping
    status = "max_iterations"
    gnorm = float("inf")
    it = 0
    if nvar == 0:
        return LMResult(x, cost, cost, 0, "parameter_tolerance", history, 0.0)

    for it in range(1, opts.max_iter + 1):
        g = J.T @ r
        gnorm = float(np.abs(g).max()) if g.size else 0.0
        if gnorm <= opts.grad_tol:
            status = "gradient_tolerance"
            it -= 1
            break
        H = (J.T @ J).tocsc()
        xnorm = np.sqrt(sum(float(np.sum(v * v)) for v in x.values()))
        saw_nonfinite = False
        accepted = False
        while True:
            delta = _solve_damped(H, g, lam, segments)
            if not np.all(np.isfinite(delta)):
                saw_nonfinite = True
            elif np.linalg.norm(delta) <= opts.param_tol * (xnorm + opts.param_tol):
                status = "parameter_tolerance"
                break
            else:
                cand = problem.retract_all(x, delta, offsets)
                r_new, J_new, cost_new = problem.linearize(cand, offsets, nvar)
                if np.isfinite(cost_new) and np.all(np.isfinite(r_new)):
                    if cost_new < cost:
                        accepted = True
                        break
                else:
                    saw_nonfinite = True
            lam *= 2.0
            if lam > _MAX_DAMPING:
                if saw_nonfinite:
                    raise SolverError("damping exceeded 1e32 while steps kept producing non-finite residuals")
                status = "no_progress"
                break
        if not accepted:
            break
        rel = (cost - cost_new) / max(cost, 1e-300)
        x, r, J, cost = cand, r_new, J_new, cost_new
        history.append(cost)
        lam = max(lam / 3.0, 1e-16)
        if rel < opts.fn_tol:
            status = "function_tolerance"
            break
    log.debug("LM finished: %s after %d iterations, cost %.6g -> %.6g", status, it, initial, cost)
    for name, g in problem.groups.items():
        g.values = x[name]
    return LMResult(x, initial, cost, it, status, history, gnorm)


def check_jacobian(problem: LeastSquaresProblem, values: dict[str, np.ndarray] | None = None, step: float = 1e-6) -> dict[str, float]:
    """Largest analytic-vs-central-difference discrepancy per residual group.

    Each term's discrepancy is ``max|J - J_fd| / max(max|J_fd|, 1)``, so it is
    relative for large Jacobians and absolute for small ones.
    """
    values = problem.values() if values is None else values
    out = {}
    for res in problem.residuals:
        gathered = problem.gather(res, values)
        _, jacs = res.fn(*gathered, jac=True)
        worst = 0.0
        for k, ((gname, _), jk) in enumerate(zip(res.blocks, jacs)):
            grp = problem.groups[gname]
            fd = np.zeros_like(jk)
            for c in range(grp.local_dim):
                e = np.zeros((len(gathered[k]), grp.local_dim))
                e[:, c] = step
                plus = list(gathered)
                minus = list(gathered)
                plus[k] = _retract_free(grp, gathered[k], e)
                minus[k] = _retract_free(grp, gathered[k], -e)
                rp, _ = res.fn(*plus, jac=False)
                rm, _ = res.fn(*minus, jac=False)
                if grp.manifold == "so3":
                    h = np.full(len(gathered[k]), 2.0 * step)
                else:
                    # the step actually taken after rounding
                    h = (plus[k] - minus[k])[:, c]
                fd[:, :, c] = (rp - rm) / h[:, None]
            diff = np.abs(jk - fd).reshape(len(jk), -1).max(axis=1)
            scale = np.maximum(np.abs(fd).reshape(len(fd), -1).max(axis=1), 1.0)
            if len(diff):
                worst = max(worst, float((diff / scale).max()))
        out[res.name] = worst
    return out


def _retract_free(grp: ParameterGroup, values, delta):
    if grp.manifold == "so3":
        return so3.exp(delta) @ values
    return values + delta
