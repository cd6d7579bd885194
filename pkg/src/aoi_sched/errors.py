"""Exception types shared across the package."""


class PlantInvariantError(ValueError):
    """A plant violates a structural assumption (dimensions, ranks, spectra)."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to converge within its iteration budget."""


class GenerationError(RuntimeError):
    """Random plant generation exhausted its retry budget."""


class StabilityError(ValueError):
    """Parameters violate the stability condition alpha * (1 - p) < 1."""


class FeasibilityError(ValueError):
    """No feasible solution exists (e.g. no stabilizing randomized policy)."""


class OracleError(RuntimeError):
    """A numerical oracle (bisection / value iteration) failed."""


class UnsupportedPlantError(ValueError):
    """The requested computation is not supported for this plant (e.g. defective A)."""


class ResourceBudgetError(RuntimeError):
    """The requested computation exceeds the configured state-space budget."""
