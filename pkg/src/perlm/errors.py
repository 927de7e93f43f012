"""Exception types shared across the package."""


class PerlmError(Exception):
    """Base class for all package errors."""


class DimensionError(PerlmError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(PerlmError, ValueError):
    """A configuration value is out of its legal range or inconsistent."""


class VocabFormatError(PerlmError, ValueError):
    """Vocabulary file violates the one-token-per-line contract."""


class InstanceParseError(PerlmError, ValueError):
    """An instance record line could not be parsed.

    Carries ``byte_offset``: position of the offending line in the file.
    """

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class InstanceCorruptionError(PerlmError, ValueError):
    """An instance violates its own invariants (e.g. target on a pad)."""


class TrainingDivergenceError(PerlmError, RuntimeError):
    """Training produced a non-finite loss or gradient.

    ``last_checkpoint`` names the most recent usable checkpoint, if any.
    """

    def __init__(self, message: str, last_checkpoint: str | None = None):
        if last_checkpoint:
            message = f"{message}; last good checkpoint: {last_checkpoint}"
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class LabelEncodingError(PerlmError, ValueError):
    """A corruption cannot be expressed in the tagging scheme."""


class EvaluationError(PerlmError, ValueError):
    """Gold and predicted labelings are not comparable."""
