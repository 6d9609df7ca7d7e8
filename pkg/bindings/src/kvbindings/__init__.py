"""Buffer-oriented surface over the selection and streaming engine.

Callers hand in contiguous float32/float64 arrays and plain mapping
configs; selection results come back as newly allocated index arrays.
Outputs are index-for-index identical to the engine CLI on equivalent
inputs.
"""
from .binding import (
    BoundSession,
    SessionClosedError,
    compress_layer,
    engine_version,
)

__version__ = "0.1.0"

__all__ = [
    "BoundSession",
    "SessionClosedError",
    "compress_layer",
    "engine_version",
    "__version__",
]
