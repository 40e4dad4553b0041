"""Embedding extractor for image/caption pairs.

Reads a source manifest (CSV or JSON lines), encodes every decodable
image and its caption with a frozen backend, and writes the consumer's
interchange and binary dataset formats.  Rows with missing or broken
images are skipped and logged to a sidecar report rather than aborting
the run.
"""

from .backends import (
    BACKENDS,
    IMG_WIDTH,
    TXT_WIDTH,
    Blip2Backend,
    StubBackend,
    make_backend,
)
from .errors import BackendError, ExtractError, ManifestError, WidthError
from .manifest import SPLITS, SourceManifest, SourceRow, load_manifest
from .pipeline import (
    ExtractResult,
    SkipReport,
    convert_to_dataset,
    extract_to_jsonl,
    load_image,
    run,
)

__version__ = "0.1.0"

__all__ = [
    "BACKENDS",
    "BackendError",
    "Blip2Backend",
    "ExtractError",
    "ExtractResult",
    "IMG_WIDTH",
    "ManifestError",
    "SPLITS",
    "SkipReport",
    "SourceManifest",
    "SourceRow",
    "StubBackend",
    "TXT_WIDTH",
    "WidthError",
    "convert_to_dataset",
    "extract_to_jsonl",
    "load_image",
    "load_manifest",
    "make_backend",
    "run",
    "__version__",
]
