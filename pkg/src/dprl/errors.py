"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so new failure modes should
subclass one of the four families below rather than raising bare errors.
"""


class DprlError(Exception):
    """Base class for all library errors."""


class ConfigError(DprlError, ValueError):
    """Invalid experiment configuration (exit code 2)."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DataError(DprlError):
    """Unreadable or inconsistent dataset / checkpoint (exit code 3)."""


class ParseError(DataError, ValueError):
    """Malformed binary container. Carries the field name and byte offset."""

    def __init__(self, message, field=None, offset=None):
        self.field = field
        self.offset = offset
        where = []
        if field is not None:
            where.append(f"field {field}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class NumericalError(DprlError, ArithmeticError):
    """Iterative numerics failed to converge (exit code 4)."""


class DegenerateGeometryError(NumericalError):
    """Every candidate class had a vanishing logit-gradient difference."""


class DimensionError(DprlError, ValueError):
    """Shape mismatch between operands."""


class DomainError(DprlError, ValueError):
    """Argument outside its documented domain."""
