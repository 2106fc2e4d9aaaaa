"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations

from typing import Any


class SmoothingError(Exception):
    """Base class for all errors raised by semantic_smoothing."""


class DomainError(SmoothingError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class StructuralError(SmoothingError, ValueError):
    """Shapes or layer kinds do not fit together."""


class TapeUsageError(SmoothingError, RuntimeError):
    """A gradient tape was reused or queried after it was consumed."""


class CheckpointFormatError(SmoothingError):
    """A checkpoint file cannot be decoded into a model."""

    def __init__(self, message: str, field: str | None = None) -> None:
        self.field = field
        super().__init__(f"{message} (field: {field})" if field else message)


class CheckpointVersionError(CheckpointFormatError):
    """A checkpoint was written by an incompatible format version."""

    def __init__(self, found: int, expected: int) -> None:
        self.found = found
        self.expected = expected
        super().__init__(
            f"Unsupported checkpoint format_version {found}; this build reads version {expected}",
            field="format_version",
        )


class VocabularyLookupError(SmoothingError, KeyError):
    """A word is missing from the embedding vocabulary."""

    def __init__(self, word: str) -> None:
        self.word = word
        super().__init__(f"Unknown word: {word!r}")

    def __str__(self) -> str:
        return f"Unknown word: {self.word!r}"


class SoundnessError(SmoothingError):
    """An interval bound does not contain the value it claims to bound."""


class CorpusFormatError(SmoothingError):
    """An embeddings, substitution-table or dataset file is malformed."""

    def __init__(self, message: str, path: Any = None, line: int | None = None) -> None:
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class DataError(SmoothingError, ValueError):
    """A labeled example is inconsistent with the model it is fed to."""


class ConfigurationError(SmoothingError, ValueError):
    """A configuration value or combination of values is invalid."""


class TrainingDivergedError(SmoothingError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, message: str, last_good: Any = None) -> None:
        self.last_good = last_good
        super().__init__(message)


class CertificationError(SmoothingError):
    """Certifying one example of a dataset failed."""

    def __init__(self, example_id: int, cause: Exception) -> None:
        self.example_id = example_id
        self.cause = cause
        super().__init__(f"Certification failed for example {example_id}: {cause}")
