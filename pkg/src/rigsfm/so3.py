"""Rotation-group primitives.

Rotations are plain ``(3, 3)`` float arrays (world-to-camera convention).
Every function accepts a leading batch dimension where it makes sense, so
``exp`` of an ``(n, 3)`` array returns ``(n, 3, 3)``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

_SMALL_ANGLE = 1e-6
_COINCIDENT = 1e-12


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector (batched)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula, with a Taylor branch near zero."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = hat(omega)
    K2 = K @ K
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * K2


def angle(r: np.ndarray) -> np.ndarray:
    """Rotation angle in ``[0, pi]``, accurate at both ends of the range."""
    r = np.asarray(r, dtype=float)
    w = 0.5 * vee(r - np.swapaxes(r, -1, -2))
    c = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(np.linalg.norm(w, axis=-1), c)


def log(r: np.ndarray) -> np.ndarray:
    """Canonical axis-angle vector with angle in ``[0, pi]``."""
    r = np.asarray(r, dtype=float)
    w = 0.5 * vee(r - np.swapaxes(r, -1, -2))
    s = np.linalg.norm(w, axis=-1)
    c = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(s, c)

    small = theta < _SMALL_ANGLE
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / np.where(small, 1.0, s))
    out = scale[..., None] * w

    wide = c < -0.5
    if np.any(wide):
        # axis from the largest diagonal of the symmetric part: avoids the
        # cancellation in w when sin(theta) -> 0
        rw = r[wide]
        cw = c[wide]
        sym = 0.5 * (rw + np.swapaxes(rw, -1, -2))
        aat = (sym - cw[:, None, None] * np.eye(3)) / (1.0 - cw)[:, None, None]
        k = np.argmax(np.diagonal(aat, axis1=-2, axis2=-1), axis=-1)
        idx = np.arange(len(k))
        ak = np.sqrt(np.maximum(aat[idx, k, k], 0.0))
        axis = aat[idx, k, :] / ak[:, None]
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        sign = np.where(np.einsum("ni,ni->n", axis, w[wide]) < 0.0, -1.0, 1.0)
        out[wide] = (sign * theta[wide])[:, None] * axis
    return out


def geodesic_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle of ``a @ b.T`` in radians (batched, broadcasting)."""
    return angle(np.asarray(a) @ np.swapaxes(np.asarray(b), -1, -2))


def is_rotation(r: np.ndarray, tol: float = 1e-9) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(np.abs(r @ r.T - np.eye(3)).max() <= tol and abs(np.linalg.det(r) - 1.0) <= tol)


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm.

    Raises:
        ValueError: if ``m`` is singular (or numerically so) or not finite.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise ValueError("cannot project a non-finite or non-3x3 matrix onto SO(3)")
    u, sv, vt = np.linalg.svd(m)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        raise ValueError(f"matrix is singular (singular values {sv}); not projectable to SO(3)")
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def from_quaternion(q) -> np.ndarray:
    """Hamilton quaternion ``(w, x, y, z)`` to matrix; normalizes first."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def to_quaternion(r: np.ndarray) -> np.ndarray:
    """Matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def random_rotation(rng: np.random.Generator, size=None) -> np.ndarray:
    """Haar-uniform rotation(s) via uniformly sampled unit quaternions."""
    n = 1 if size is None else int(size)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    out = np.stack([from_quaternion(qi) for qi in q])
    return out[0] if size is None else out


class MedianResult(NamedTuple):
    rotation: np.ndarray
    converged: bool
    iterations: int
    cost: float


def _median_cost(r: np.ndarray, samples: np.ndarray) -> float:
    return float(geodesic_distance(r[None], samples).sum())


def geodesic_median(samples, tol: float = 1e-10, max_iter: int = 100, full_output: bool = False):
    """Rotation minimizing the sum of geodesic distances to ``samples``.

    Weiszfeld iteration in the tangent space of the current estimate, seeded
    at the projected chordal mean. When the iterate lands on a sample the
    Vardi-Zhang optimality test decides whether that sample is the median;
    otherwise the iterate is nudged off it by 1e-9 rad.

    Args:
        samples: ``(n, 3, 3)`` array or sequence of rotations.
        tol: stop once the tangent step is shorter than this (radians).
        max_iter: iteration budget.
        full_output: return a :class:`MedianResult` instead of the matrix.
    """
    samples = np.asarray(samples, dtype=float).reshape(-1, 3, 3)
    if len(samples) == 0:
        raise ValueError("geodesic_median needs at least one sample")
    if len(samples) == 1:
        r = samples[0].copy()
        return MedianResult(r, True, 0, 0.0) if full_output else r

    rng = np.random.default_rng(0)
    r = project_to_so3(samples.mean(axis=0)) if abs(np.linalg.det(samples.mean(axis=0))) > 1e-9 else samples[0]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        v = log(r.T @ samples)
        d = np.linalg.norm(v, axis=1)
        hit = d < _COINCIDENT
        if np.any(hit):
            rest = ~hit
            if not np.any(rest):
                converged = True
                break
            pull = np.linalg.norm((v[rest] / d[rest, None]).sum(axis=0))
            if pull <= hit.sum():
                converged = True
                break
            nudge = rng.normal(size=3)
            r = r @ exp(1e-9 * nudge / np.linalg.norm(nudge))
            continue
        w = 1.0 / d
        step = (v * w[:, None]).sum(axis=0) / w.sum()
        r = r @ exp(step)
        if np.linalg.norm(step) < tol:
            converged = True
            break

    cost = _median_cost(r, samples)
    sample_costs = geodesic_distance(samples[:, None], samples[None]).sum(axis=1)
    best = int(np.argmin(sample_costs))
    if sample_costs[best] < cost:
        r, cost = samples[best].copy(), float(sample_costs[best])
    if full_output:
        return MedianResult(r, converged, it, cost)
    return r
