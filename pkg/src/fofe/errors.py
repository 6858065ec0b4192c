"""Exception hierarchy shared by the package."""


class FofeError(Exception):
    """Base class for every error raised by this package."""

    kind = "error"


class DecodeError(FofeError, ValueError):
    kind = "decode"


class AmbiguousCodeError(DecodeError):
    kind = "ambiguous"


class MalformedCodeError(DecodeError):
    kind = "malformed"


class SequenceTooLongError(DecodeError):
    kind = "too-long"


class TooLargeError(FofeError, ValueError):
    """An enumeration guard was exceeded."""

    kind = "too-large"


class TrainingDiverged(FofeError, RuntimeError):
    kind = "diverged"


class NonFiniteError(FofeError, FloatingPointError):
    """A forward/backward pass produced NaN or Inf."""

    kind = "non-finite"

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ModelFormatError(FofeError, ValueError):
    kind = "model-format"


class BadMagicError(ModelFormatError):
    kind = "bad-magic"


class VersionMismatchError(ModelFormatError):
    kind = "version-mismatch"


class ShapeMismatchError(ModelFormatError):
    kind = "shape-mismatch"


class TruncatedModelError(ModelFormatError):
    kind = "truncated"

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class VocabMismatchError(FofeError, ValueError):
    kind = "vocab-mismatch"
