"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class ContractError(ValueError):
    """Raised when a caller violates an operation precondition."""


class ConfigError(ValueError):
    """Raised for invalid configuration values.

    ``path`` carries the dotted field path when one is known.
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step sees NaN/inf in a gradient."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")
