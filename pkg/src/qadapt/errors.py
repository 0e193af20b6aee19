"""Exception families, each mapped to a distinct CLI exit code."""


class QadaptError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class NotFoundError(QadaptError):
    """A required path, scene or resource does not exist."""

    exit_code = 3


class ArchiveFormatError(QadaptError):
    """Archive bytes violate the on-disk format (magic, version, sizes)."""

    exit_code = 4


class ValidationError(QadaptError):
    """Data violates a store or model invariant."""

    exit_code = 5


class NormOutOfTolerance(ValidationError):
    """Embedding norm deviates from 1.0 by more than the load tolerance."""


class DuplicateScene(ValidationError):
    """Scene id already present in the store."""


class EmptySegment(ValidationError):
    """Segment has no points where points are required."""


class NoGroundTruth(ValidationError):
    """Evaluation requested for a scene without ground-truth points."""


class LlmError(QadaptError):
    """Language-model gateway failure."""

    exit_code = 6


class NoRuleForQuery(LlmError):
    """Stub backend has no decomposition rule for the query."""


class UnparseableLlmReply(LlmError):
    """Model reply did not contain a parseable JSON array after retries."""


class EncoderError(QadaptError):
    """Text-encoder failure (transport, shape)."""

    exit_code = 7


class DimMismatch(EncoderError):
    """Feature dimension disagrees with the expected dimension."""


class TrainError(QadaptError):
    """Adaptation loop failure."""

    exit_code = 8


class NonFiniteGradient(TrainError):
    """A gradient contained NaN or Inf; the epoch is aborted."""


class EmptyTrainingSet(TrainError):
    """No training items were selected."""
