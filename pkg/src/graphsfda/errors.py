"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible dimensions. Message names both shapes."""


class ContractError(ValueError):
    """A precondition or invariant of an operation was violated."""


class ParseError(ValueError):
    """A data file is malformed. Message carries the offending line number."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values and cannot continue."""
