"""Exception types shared across the pipeline."""
from __future__ import annotations


class BiasAuditError(Exception):
    """Base class for all package errors."""


class ConfigError(BiasAuditError):
    pass


class TaxonomyConfigError(ConfigError):
    pass


class MissingInput(BiasAuditError):
    pass


# --- backend / transport ---

class BackendError(BiasAuditError):
    pass


class TransportError(BackendError):
    pass


class TransportTimeout(TransportError):
    pass


class RateLimited(BackendError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class AuthError(BackendError):
    pass


class ScriptExhausted(BackendError):
    pass


class UnknownBackendPrice(BiasAuditError):
    pass


# --- parsing / validation ---

class NoStructuredBlock(BiasAuditError):
    pass


class UnknownCategory(BiasAuditError):
    def __init__(self, label: str):
        super().__init__(f"unknown taxonomy category: {label!r}")
        self.label = label


class VerdictValidationError(BiasAuditError):
    """Carries every violated constraint, not just the first."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


# --- aggregation ---

class EmptyJury(BiasAuditError):
    pass


class ZeroTotalConfidence(BiasAuditError):
    pass


# --- reporting ---

class MismatchedIds(BiasAuditError):
    pass


# --- pipeline / stage files ---

class MissingStageFile(BiasAuditError):
    pass


class SchemaVersionMismatch(BiasAuditError):
    pass


class FatalBackendError(BiasAuditError):
    pass
