"""Exception hierarchy shared by the SAAO domain modules."""

from typing import Optional


class SaaoError(Exception):
    """Base class for every error raised by the package."""


class GeometryError(SaaoError, ValueError):
    """Invalid point cloud, dataset, or shape request."""


class CloudFormatError(GeometryError):
    """Malformed cloud or manifest file."""

    def __init__(self, message: str, line_number: Optional[int] = None) -> None:
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class SpectralError(SaaoError, ValueError):
    """Invalid graph, Laplacian, basis, or mask."""


class ConvergenceError(SpectralError):
    """The Jacobi eigensolver ran out of sweeps."""

    def __init__(self, residual: float, sweeps: int) -> None:
        super().__init__(
            f"Jacobi eigensolver did not converge after {sweeps} sweeps "
            f"(off-diagonal norm {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


class MetricError(SaaoError, ValueError):
    """Invalid inputs to a distance or mixing metric."""


class ModelError(SaaoError, ValueError):
    """Invalid classifier input or parameters."""


class ModelFormatError(ModelError):
    """Malformed model file."""


class AttackError(SaaoError, RuntimeError):
    """The attack could not run or produced non-finite values."""


class DefenseError(SaaoError, ValueError):
    """Invalid defense request."""


class ConfigError(SaaoError, ValueError):
    """Invalid experiment configuration."""
