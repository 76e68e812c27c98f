"""Exception types shared across the package."""


class DasMaeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DasMaeError):
    """Array dimensions do not line up; the message reports both shapes."""


class ContractError(DasMaeError):
    """A documented precondition was violated by the caller."""


class InputError(DasMaeError):
    """A value is outside its valid domain (e.g. an out-of-range label)."""


class FormatError(DasMaeError):
    """A file does not match its on-disk format; names the failing offset."""


class DegenerateInputError(DasMaeError):
    """Input has no usable variation (e.g. a constant plot)."""


class StrategyInapplicableError(ContractError):
    """A mask strategy cannot be applied to this patch grid."""


class NumericalDegeneracyError(DasMaeError):
    """An iterative numerical routine failed to converge on this input."""
