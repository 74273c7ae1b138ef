"""Dual-track (case + skill) retrieval memory with learned reranking."""

from dualmem.errors import (
    ConflictError,
    ContractError,
    DegenerateGeometryError,
    InvalidComparisonError,
    InvalidInputError,
    NonWatertightError,
    NotFoundError,
    NumericError,
    ParseError,
)
from dualmem.hyper import HyperParams

__version__ = "0.1.0"

__all__ = [
    "ConflictError",
    "ContractError",
    "DegenerateGeometryError",
    "HyperParams",
    "InvalidComparisonError",
    "InvalidInputError",
    "NonWatertightError",
    "NotFoundError",
    "NumericError",
    "ParseError",
]
