"""Exception types shared across the library."""


class QuadraError(Exception):
    """Base class for library errors."""


class DimensionError(QuadraError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class InputError(QuadraError, ValueError):
    """Invalid argument values (non-finite data, bad labels, bad indices)."""


class ConfigError(QuadraError, ValueError):
    """Invalid model configuration (family/kind mismatch, broken chain)."""


class ParseError(QuadraError, ValueError):
    """Config text rejected; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(QuadraError, RuntimeError):
    """Stale/mismatched cache or corrupted checkpoint."""


class DegreeError(QuadraError, ValueError):
    """Scalar network output failed polynomial-degree certification."""


class NumericError(QuadraError, FloatingPointError):
    """Non-finite values where finite ones are required (divergence)."""


class IngestError(QuadraError, ValueError):
    """Dataset file rejected; names the file and byte offset."""

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        parts = []
        if path is not None:
            parts.append(str(path))
        if offset is not None:
            parts.append(f"offset {offset}")
        if parts:
            message = f"{' '.join(parts)}: {message}"
        super().__init__(message)
