"""Exception hierarchy shared across the toolkit.

Exit-code mapping for the CLI: InputFormatError subclasses exit with 2,
everything else with 1.
"""


class RecapError(Exception):
    """Base class for all toolkit errors."""

    code = "error"


class InputFormatError(RecapError):
    """Malformed or mismatched input files / arguments (CLI exit code 2)."""

    code = "input_format"


class ZeroVector(RecapError):
    code = "zero_vector"


class DimensionMismatch(InputFormatError):
    code = "dimension_mismatch"


class DuplicateId(InputFormatError):
    code = "duplicate_id"


class EmptyCorpus(InputFormatError):
    code = "empty_corpus"


class IoFailure(RecapError):
    code = "io_failure"


class FormatVersionMismatch(InputFormatError):
    code = "format_version_mismatch"


class ChecksumMismatch(InputFormatError):
    code = "checksum_mismatch"


class RowCountMismatch(InputFormatError):
    code = "row_count_mismatch"


class NonFiniteEmbedding(InputFormatError):
    code = "non_finite_embedding"


class LengthMismatch(RecapError):
    code = "length_mismatch"


class TooManyNeighbors(RecapError):
    code = "too_many_neighbors"


class ShapeMismatch(RecapError):
    code = "shape_mismatch"


class ContextOverflow(RecapError):
    code = "context_overflow"


class InvalidTokenId(RecapError):
    code = "invalid_token_id"


class NonFiniteLoss(RecapError):
    code = "non_finite_loss"

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class EmptyInput(InputFormatError):
    code = "empty_input"


class MissingCaptionEmbeddings(RecapError):
    code = "missing_caption_embeddings"


class ConfigError(InputFormatError):
    code = "config_error"
