"""Exception hierarchy.

Two families matter to callers: :class:`ConfigurationError` (bad input,
files, schemas; CLI exit code 2) and :class:`NumericalError` (a computation
that failed or diverged; CLI exit code 3).
"""


class MobmlError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MobmlError, ValueError):
    """Invalid user input. ``field`` names the offending path when known."""

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class NumericalError(MobmlError, ArithmeticError):
    """A numerical procedure failed."""


# -- mobility ---------------------------------------------------------------

class ZeroSeparation(NumericalError):
    """Two particles coincide, so the pair direction is undefined."""


class NotFactorizable(NumericalError):
    """Even the eigenvalue-clipping repair produced a non-finite factor."""


# -- dynamics ---------------------------------------------------------------

class NonFiniteState(NumericalError):
    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)


# -- inference --------------------------------------------------------------

class InsufficientForceBasis(NumericalError):
    pass


class DegenerateLag(ConfigurationError):
    pass


class NonFinite(NumericalError):
    pass


class SingularKernel(NumericalError):
    pass


class DidNotConverge(UserWarning):
    """Emitted (as a warning) when the optimizer stops on its iteration cap."""


# -- io ---------------------------------------------------------------------

class MalformedXML(ConfigurationError):
    pass


class MissingModelData(ConfigurationError):
    pass


class SchemaVersionUnsupported(ConfigurationError):
    pass


class InvalidModelPayload(ConfigurationError):
    pass


class MalformedRow(ConfigurationError):
    def __init__(self, message, line):
        self.line = line
        super().__init__(f"line {line}: {message}")


class NonUniformSpacing(ConfigurationError):
    pass
