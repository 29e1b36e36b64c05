"""Exception types shared across the package."""


class NlhomogError(Exception):
    """Base class for all package errors."""


class MomentDivergenceError(NlhomogError):
    """Kernel moment quadrature did not converge under box doubling."""


class TruncationError(NlhomogError):
    """Lattice-sum or box truncation cannot reach the requested tolerance."""

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class CoefficientBoundsError(NlhomogError):
    """A coefficient field violates the two-sided positivity bounds."""


class GridMismatchError(NlhomogError):
    """Operands tabulated on different grids."""


class ResolutionError(NlhomogError):
    """Grid too coarse for the requested scale, or dense assembly too large."""


class SolvabilityError(NlhomogError):
    """Right-hand side not orthogonal to the adjoint kernel within tolerance."""


class SolverBreakdownError(NlhomogError):
    """Linear solve failed or its residual exceeds the contract."""


class NonContractionError(NlhomogError):
    """Deflated Neumann iteration exceeded its budget without converging."""

    def __init__(self, message, spectral_radius_estimate=None):
        super().__init__(message)
        self.spectral_radius_estimate = spectral_radius_estimate


class ConfigError(NlhomogError):
    """Invalid run configuration (schema violation, bad value, unknown key)."""


class SimulationBudgetError(ConfigError):
    """Requested ensemble exceeds the jump budget."""

    def __init__(self, message, expected_jumps=None):
        super().__init__(message)
        self.expected_jumps = expected_jumps
