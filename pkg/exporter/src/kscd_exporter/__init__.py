"""Trace exporter: hooks a transformer checkpoint and writes KSCD files."""

from .capture import CAPTURE_CONVENTIONS, ExportConfig, capture_prompt, export
from .errors import ExportError
from .format import write_kscd
from .reference import (
    ByteTokenizer,
    TinyCausalLM,
    TinyConfig,
    load_checkpoint,
    load_model,
    save_checkpoint,
)

__version__ = "0.1.0"
