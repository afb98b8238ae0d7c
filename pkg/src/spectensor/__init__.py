"""Spectral decomposition of noisy orthogonal 4-tensors and orthonormal
dictionary learning from 4th-moment tensors."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    ConvergenceError,
    DegeneracyError,
    PlanError,
    SymmetryError,
)
from .tensor import (
    PLAN_SIGMA,
    PLAN_SQUARE,
    PLAN_TALL_123_4,
    PLAN_TALL_124_3,
    MatrixView,
    ReshapePlan,
    SpectralDecomp,
    Tensor4,
    clip_singular,
    frobenius,
    psd_truncate,
    read_t4,
    reshape,
    spectral_norm,
    subspace_power_iter,
    unreshape,
    write_t4,
)

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "DegeneracyError",
    "PlanError",
    "SymmetryError",
    "MatrixView",
    "ReshapePlan",
    "SpectralDecomp",
    "Tensor4",
    "PLAN_SQUARE",
    "PLAN_SIGMA",
    "PLAN_TALL_123_4",
    "PLAN_TALL_124_3",
    "clip_singular",
    "frobenius",
    "psd_truncate",
    "read_t4",
    "reshape",
    "spectral_norm",
    "subspace_power_iter",
    "unreshape",
    "write_t4",
]
