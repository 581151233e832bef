"""Nonsmooth trust-region methods with an application to control of VIs of the second kind."""

from .errors import (
    BiactiveSetTooLarge,
    CauchyDecreaseViolation,
    DegenerateDenominator,
    NotConverged,
    NstrError,
    OracleFailure,
    PreconditionViolated,
)
from .linalg import IndexSet, SparseSpdMatrix
from .models import GradientBundle
from .trcore import IterateRecord, Status, StepKind, TrParams, TrState, run

__version__ = "0.1.0"

__all__ = [
    "BiactiveSetTooLarge",
    "CauchyDecreaseViolation",
    "DegenerateDenominator",
    "GradientBundle",
    "IndexSet",
    "IterateRecord",
    "NotConverged",
    "NstrError",
    "OracleFailure",
    "PreconditionViolated",
    "SparseSpdMatrix",
    "Status",
    "StepKind",
    "TrParams",
    "TrState",
    "run",
]
