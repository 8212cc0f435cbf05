"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform (raised with the offending shapes)."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ParseError(ValueError):
    """A data or config file could not be parsed; carries the line number."""


class ConfigError(ValueError):
    """A config document contains unknown or invalid keys."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries iteration and loss name."""

    def __init__(self, iteration: int, loss_name: str, value: float):
        self.iteration = iteration
        self.loss_name = loss_name
        self.value = value
        super().__init__(
            f"non-finite loss {loss_name}={value!r} at iteration {iteration}"
        )
