"""Optimization machinery shared by the averaging and adjustment stages."""

from .admm import AdmmL1Problem, AdmmOptions, AdmmResult, SingularSystemError, admm_l1
from .kernels import RobustKernel, kernel_weight
from .lsq import (
    LeastSquaresProblem,
    LMOptions,
    LMResult,
    ParameterGroup,
    ResidualGroup,
    SolverError,
    check_jacobian,
    levenberg_marquardt,
)

__all__ = [
    "AdmmL1Problem",
    "AdmmOptions",
    "AdmmResult",
    "LMOptions",
    "LMResult",
    "LeastSquaresProblem",
    "ParameterGroup",
    "ResidualGroup",
    "RobustKernel",
    "SingularSystemError",
    "SolverError",
    "admm_l1",
    "check_jacobian",
    "kernel_weight",
    "levenberg_marquardt",
]
