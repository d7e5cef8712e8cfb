"""Exception types shared across the package."""


class EgomatchError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(EgomatchError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(EgomatchError, ValueError):
    """A numeric parameter is outside its legal range."""


class CapacityError(EgomatchError, ValueError):
    """An input exceeds a fixed capacity limit (e.g. the position table)."""


class DegenerateInputError(EgomatchError, ValueError):
    """Geometric input is too degenerate for the requested computation."""


class NumericError(EgomatchError, ArithmeticError):
    """A computation produced non-finite values where finite ones are required."""


class ConfigError(EgomatchError, ValueError):
    """A run configuration file or value is invalid. CLI exit code 2."""


class DataError(EgomatchError, ValueError):
    """A dataset or input file is missing or malformed. CLI exit code 3."""


class PacketParseError(DataError):
    """A wire packet failed to parse; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class EncodingError(EgomatchError, ValueError):
    """A graph cannot be serialized to the wire format."""


class DivergenceError(NumericError):
    """Training diverged (non-finite loss). CLI exit code 4."""
