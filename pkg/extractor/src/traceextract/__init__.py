"""traceextract: turn local checkpoints + question files into routing traces."""

from .bpe import ByteBPE, TokenizerError
from .extract import ExtractReport, extract
from .job import DatasetRow, DecodingSpec, ExtractError, ExtractionJob, read_dataset
from .model import CheckpointError, TinyGPT
from .writer import TraceEmitter, build_header

__all__ = [
    "ByteBPE",
    "CheckpointError",
    "DatasetRow",
    "DecodingSpec",
    "ExtractError",
    "ExtractReport",
    "ExtractionJob",
    "TinyGPT",
    "TokenizerError",
    "TraceEmitter",
    "build_header",
    "extract",
    "read_dataset",
]
