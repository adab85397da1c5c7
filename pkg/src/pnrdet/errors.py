"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A model parameter is outside its valid domain."""


class InputError(ValueError):
    """Data handed to an analysis routine is empty or malformed."""


class EstimationError(RuntimeError):
    """An estimator could not produce a value from the data it was given."""


class BiasRangeError(ParameterError):
    """Requested excess bias lies outside the modeled range."""
