"""Fuzzy-aware loss and a desk-scale source-free domain adaptation lab."""

from fuzzyadapt.errors import (
    AssumptionViolatedError,
    ConfigError,
    DivergedError,
    InvalidInputError,
    ParseError,
    ResolutionError,
    UnsupportedVersionError,
)

__version__ = "0.1.0"

__all__ = [
    "AssumptionViolatedError",
    "ConfigError",
    "DivergedError",
    "InvalidInputError",
    "ParseError",
    "ResolutionError",
    "UnsupportedVersionError",
]
