"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad input: parameters, preconditions, config fields, mesh defects."""


class NumericalError(RuntimeError):
    """Numerical failure: singular systems, NaNs, diverged iterations."""
