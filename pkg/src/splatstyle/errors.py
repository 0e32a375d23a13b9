"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ValidationError -> 2,
NumericalError -> 3, MissingArtifactError -> 4.
"""


class SplatStyleError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SplatStyleError):
    """Bad input: malformed file, inconsistent config, violated precondition."""


class SceneLoadError(ValidationError):
    """Scene file could not be parsed; message names the offending field."""


class NumericalError(SplatStyleError):
    """Computation produced non-finite values or a degenerate system."""


class MissingArtifactError(SplatStyleError):
    """A pipeline stage was invoked before its upstream artifacts exist."""
