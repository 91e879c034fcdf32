"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EngineError):
    """Operand shapes are incompatible."""


class ConfigurationError(EngineError):
    """A model or run configuration violates one of its constraints."""


class ParameterError(EngineError):
    """An operation parameter is outside its documented range."""


class PgmParseError(EngineError):
    """A PGM file is malformed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchedulingError(EngineError):
    """A partial step consulted a cache entry that was never populated."""


class IntegrityError(EngineError):
    """A cache refresh received incomplete block outputs."""


class InsufficientDataError(EngineError):
    """Too few samples to run a statistical detector."""


class UndefinedSimilarityError(EngineError):
    """Cosine similarity requested against a zero vector."""


class NumericsError(EngineError):
    """An exported operation produced non-finite values."""
