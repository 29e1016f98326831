"""Exception hierarchy shared across the package."""

from __future__ import annotations


class ToolmemError(Exception):
    """Base class for all package errors."""


# -- data model / store --

class IndexOutOfRange(ToolmemError, IndexError):
    pass


class DuplicatePageId(ToolmemError, KeyError):
    pass


class ZeroVectorQuery(ToolmemError, ValueError):
    """The query text embeds to the zero vector, so cosine is undefined."""


# -- embeddings --

class DimensionMismatch(ToolmemError, ValueError):
    pass


class ZeroVector(ToolmemError, ValueError):
    pass


class ProviderUnavailable(ToolmemError):
    """Remote embedding endpoint failed. Retriable."""


# -- extraction --

class EmptySession(ToolmemError, ValueError):
    pass


class MalformedExtraction(ToolmemError):
    pass


class CoverageRepairFailed(ToolmemError):
    pass


# -- llm gateway --

class BackendFailure(ToolmemError):
    """Any failure of a completion backend."""


class TransportError(BackendFailure):
    """Network-level failure. Retried with backoff before surfacing."""


class ProtocolError(BackendFailure):
    """Response could not be interpreted. Not retried."""


class BudgetExceeded(BackendFailure):
    """Token ceiling for one QA session was reached."""


class ScriptMismatch(BackendFailure, AssertionError):
    """A scripted fixture's request matcher did not match the incoming turn."""


class ScriptExhausted(BackendFailure):
    pass


# -- evaluation / config --

class ParseError(ToolmemError, ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class UnknownCategory(ToolmemError, ValueError):
    pass


class ConfigError(ToolmemError, ValueError):
    pass
