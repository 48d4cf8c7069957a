"""Export real images and captions to the recap binary manifest formats."""

__version__ = "0.1.0"

from .core import ExportReport, export, export_captions, read_manifest
from .encoder import BUILTIN_MODEL_ID, resolve_encoder
from .errors import ExporterError, ManifestError, SelfCheckError, SkipRateExceeded

__all__ = [
    "BUILTIN_MODEL_ID",
    "ExportReport",
    "ExporterError",
    "ManifestError",
    "SelfCheckError",
    "SkipRateExceeded",
    "export",
    "export_captions",
    "read_manifest",
    "resolve_encoder",
]
