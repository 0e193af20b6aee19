"""Segment-archive extraction and the text-encoder HTTP service."""

__version__ = "0.1.0"

from .extract import ExtractionJob, extract
from .server import serve_text_encoder

__all__ = ["ExtractionJob", "extract", "serve_text_encoder", "__version__"]
