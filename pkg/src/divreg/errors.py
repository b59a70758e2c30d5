"""Exception hierarchy shared across the package."""


class DivregError(Exception):
    """Base class for all package-specific errors."""


class DomainError(DivregError):
    """A point lies outside the region where a field is defined."""


class GeometryError(DivregError):
    """Two objects that must share a voxel/physical frame do not."""


class FormatError(DivregError):
    """A file does not conform to the supported container subset."""


class ConfigError(DivregError):
    """An invalid or inconsistent configuration value."""


class SolverError(DivregError):
    """A linear or nonlinear solve failed to reach its target residual."""
