"""Exception hierarchy.

Library code raises these; only the CLI turns them into exit codes.
"""

from typing import Optional


class QsdError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ConfigError(QsdError):
    """Invalid configuration or usage (missing files, bad flag values)."""

    exit_code = 2


class NetworkParseError(ConfigError):
    """A network document could not be parsed or failed validation.

    line and field point at the offending place when they are known.
    """

    def __init__(
        self, message: str, line: Optional[int] = None, field: Optional[str] = None
    ):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class StructureError(QsdError, ValueError):
    """Shape or index contract violated (state of the wrong length, bad reaction index)."""


class HorizonExceeded(QsdError):
    """A paired skeleton was queried beyond its last grid point."""

    exit_code = 4

    def __init__(self, required: float, available: float, hint: str = ""):
        message = (
            f"internal time {required:.6g} is beyond the skeleton horizon {available:.6g}"
        )
        if hint:
            message += f"; {hint}"
        super().__init__(message)
        self.required = required
        self.available = available


class RegenExhausted(ConfigError):
    """The shared regeneration uniforms ran out."""


class InvalidCovariance(QsdError):
    """A covariance matrix is not symmetric or has a clearly negative eigenvalue."""


class MeshMismatch(QsdError):
    """Two histograms live on different meshes, or meshes do not nest."""


class CostGuardError(QsdError):
    """The exact assignment solver was asked for more samples than allowed."""


class ConvergenceError(QsdError):
    """An iterative method did not converge, or its input is not irreducible."""


class NumericalDegeneracy(QsdError):
    """The maximal coupling rejection loop did not terminate."""


class DivergentBound(QsdError):
    """Contraction rate gamma <= 0, so alpha >= 1 and the bound does not apply."""

    exit_code = 5


class TailFitRejected(QsdError):
    """The exponential tail of the coupling times was not accepted."""

    exit_code = 3
