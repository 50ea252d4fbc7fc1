"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a function."""


class DegenerateConfigurationError(ValueError):
    """Input geometry admits no unique (or stable) solution."""


class UndefinedResidualError(ValueError):
    """A residual cannot be evaluated, e.g. the Sampson denominator is zero."""


class InsufficientDataError(ValueError):
    """Fewer samples than an operation requires."""


class EstimationError(RuntimeError):
    """Robust estimation failed to produce a usable result.

    ``diagnostics`` carries whatever partial information the estimator
    collected before giving up.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
