"""
Exceptions raised by the HKD toolkit. Invalid arguments to pure operations
raise plain :py:class:`ValueError`; the classes below mark the failures the
command-line front-end maps onto exit codes.
"""


class ConfigurationError(ValueError):
    """Invalid experiment configuration, unknown architecture or a checkpoint
    that does not fit the requested setup."""


class DataValidationError(ValueError):
    """Data found on disk (or generated) violates the dataset contract."""


class NumericalFailure(RuntimeError):
    """A training step produced a non-finite loss."""


class ReproducibilityError(NumericalFailure):
    """Re-evaluating a stored network disagrees with the logged result."""
