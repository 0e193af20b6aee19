"""Extractor error families."""


class ExtractorError(Exception):
    exit_code = 1


class ModelLoadError(ExtractorError):
    """Requested segmenter/embedder/captioner cannot be loaded."""

    exit_code = 3


class InputError(ExtractorError):
    """Input frames are missing or malformed."""

    exit_code = 4
