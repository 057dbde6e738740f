"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller passed a value outside an operation's contract."""


class PreconditionError(RuntimeError):
    """Required state (e.g. a gradient) is missing when an operation runs."""


class InvariantViolation(ValueError):
    """Input data breaks an invariant the operation relies on."""


class DataError(RuntimeError):
    """On-disk data is missing, inconsistent or undecodable."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""
