"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class CweragError(Exception):
    """Base class for all package errors."""


class ParseError(CweragError):
    """A file could not be parsed in its documented format."""


class ValidationError(CweragError, ValueError):
    """A value violates a documented invariant."""


class ConfigError(CweragError):
    """Missing credentials or an otherwise unusable runtime configuration."""


class PreconditionError(CweragError, ValueError):
    """An operation was called with inputs outside its contract."""


class MissingFileError(CweragError, FileNotFoundError):
    pass


class SchemaError(CweragError):
    pass


class DuplicateIdError(SchemaError):
    pass


class VersionError(CweragError):
    pass


class KbIoError(CweragError, OSError):
    pass


class DimensionMismatchError(CweragError, ValueError):
    pass


class ZeroVectorError(CweragError, ValueError):
    pass


class EmbeddingError(CweragError):
    pass


class ContextOverflowError(CweragError):
    def __init__(self, message: str, *, estimated: int = 0, window: int = 0) -> None:
        super().__init__(message)
        self.estimated = estimated
        self.window = window


class AgentError(CweragError):
    pass


class ProviderError(AgentError):
    """HTTP, auth or transport failure talking to an LLM provider."""


class ProviderTimeoutError(ProviderError, TimeoutError):
    pass


class ReplayMissError(ProviderError):
    """Replay mode was asked for a request that is not in the cache."""


class MalformedAgentOutputError(AgentError):
    def __init__(self, message: str, *, raw: str = "") -> None:
        super().__init__(message)
        self.raw = raw


class UnterminatedConstructError(CweragError):
    """Unclosed block comment or string literal.

    ``tokens`` holds the complete (lossless) token stream; the unterminated
    construct is the last token and runs to end of input.
    """

    def __init__(self, message: str, *, line: int, column: int, tokens: list | None = None) -> None:
        super().__init__(f"{message} at line {line}, column {column}")
        self.line = line
        self.column = column
        self.tokens = tokens if tokens is not None else []


class EmptyDatasetError(CweragError):
    pass


class EmbeddingDimensionError(EmbeddingError, DimensionMismatchError):
    """Provider returned vectors of the wrong length."""
