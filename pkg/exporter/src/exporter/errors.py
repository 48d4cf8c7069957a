class ExporterError(Exception):
    """Base class; exit code 1 at the CLI."""

    code = "exporter_error"


class ManifestError(ExporterError):
    """Malformed manifest (duplicate id, missing field, bad JSON); exit 2."""

    code = "manifest_error"


class SkipRateExceeded(ExporterError):
    """More than 1% of manifest lines were unreadable."""

    code = "skip_rate_exceeded"


class ModelUnavailable(ExporterError):
    """model_id could not be resolved locally or via its distribution channel."""

    code = "model_unavailable"


class SelfCheckError(ExporterError):
    """A produced embedding failed the own-top-1 retrieval self-check."""

    code = "self_check_failed"
