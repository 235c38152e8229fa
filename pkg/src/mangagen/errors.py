"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
anything else -> 4.
"""

from __future__ import annotations


class MangagenError(Exception):
    """Base class for all package errors."""


class ConfigError(MangagenError):
    """Invalid or inconsistent configuration (bad keys, disagreeing stages)."""


class DataError(MangagenError):
    """Invalid input data: annotations, manifests, images, scripts."""


class AnnotationParseError(DataError):
    """Malformed annotation XML. Carries the (line, column) of the failure."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class AnnotationValidationError(DataError):
    """An annotation violates its invariants. Carries the full violation list."""

    def __init__(self, violations):
        self.violations = tuple(violations)
        lines = "; ".join(str(v) for v in self.violations)
        super().__init__(f"{len(self.violations)} violation(s): {lines}")


class CaptioningTransportError(MangagenError):
    """The captioning client failed to deliver a response. Retryable."""


class CaptioningProtocolError(DataError):
    """The captioning client answered, but the response breaks the contract."""


class SplitProtocolError(DataError):
    """A story-splitting client returned an invalid segmentation."""
