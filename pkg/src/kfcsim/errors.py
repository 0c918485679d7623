"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for simulator errors."""


class ConfigError(SimError, ValueError):
    """Invalid sizes, parameters, or experiment configuration."""


class ShapeError(SimError, ValueError):
    """Vector or feature length mismatch."""


class ArgumentError(SimError, ValueError):
    """Argument outside its allowed domain (empty batch, bad fraction...)."""


class ParseError(SimError, ValueError):
    """Malformed dataset or config file."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class IntegrityError(SimError):
    """Ledger or model-store corruption."""
