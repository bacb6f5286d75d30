"""Robust loss kernels expressed on the squared residual norm ``s``.

``rho(s)`` follows the convention where the cost of a term is ``rho(s) / 2``
and ``rho(s) = s`` for the trivial kernel; ``weight(s) = rho'(s)`` is the
IRLS weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("none", "huber", "cauchy")


@dataclass(frozen=True)
class RobustKernel:
    kind: str = "none"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}; expected one of {KINDS}")
        if not self.scale > 0:
            raise ValueError(f"kernel scale must be positive, got {self.scale}")

    def rho(self, s):
        s = np.asarray(s, dtype=float)
        a2 = self.scale * self.scale
        if self.kind == "huber":
            return np.where(s <= a2, s, 2.0 * self.scale * np.sqrt(s) - a2)
        if self.kind == "cauchy":
            return a2 * np.log1p(s / a2)
        return s

    def weight(self, s):
        s = np.asarray(s, dtype=float)
        if self.kind == "huber":
            return np.minimum(1.0, self.scale / np.sqrt(np.maximum(s, 1e-300)))
        if self.kind == "cauchy":
            return 1.0 / (1.0 + s / (self.scale * self.scale))
        return np.ones_like(s)


def kernel_weight(kernel: RobustKernel, squared_norm) -> np.ndarray:
    """IRLS weight ``rho'(s)`` at ``s = squared_norm``."""
    s = np.asarray(squared_norm, dtype=float)
    if np.any(s < 0):
        raise ValueError("squared_norm must be non-negative")
    return kernel.weight(s)

