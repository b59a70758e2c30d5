"""Incompressible diffeomorphic registration with divergence-conforming B-splines."""

from .errors import (
    ConfigError,
    DivregError,
    DomainError,
    FormatError,
    GeometryError,
    SolverError,
)

__all__ = [
    "ConfigError",
    "DivregError",
    "DomainError",
    "FormatError",
    "GeometryError",
    "SolverError",
]

__version__ = "0.1.0"
