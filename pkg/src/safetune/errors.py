"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class DomainError(ContractError):
    """An input lies outside the domain of a function (e.g. log of a non-positive value)."""


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""


class SolverError(RuntimeError):
    """The transport solver failed to reach a feasible optimum."""


class ParseError(ValueError):
    """A data or config file could not be parsed."""


class SchemaError(ValueError):
    """A record parsed but its contents do not match the expected schema."""
