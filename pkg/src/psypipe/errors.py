"""Exception hierarchy. ``category`` is the machine-readable tag the CLI prints."""


class PsypipeError(Exception):
    category = "error"


class SchemaError(PsypipeError, ValueError):
    category = "schema"


class RangeError(PsypipeError, ValueError):
    category = "range"


class IncompletenessError(PsypipeError, ValueError):
    category = "incomplete"

    def __init__(self, message: str, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class KeyMismatchError(PsypipeError, ValueError):
    category = "key-mismatch"


class ProvenanceConflictError(PsypipeError):
    category = "provenance-conflict"


class DegenerateInputError(PsypipeError, ValueError):
    category = "degenerate"


class ShapeError(PsypipeError, ValueError):
    category = "shape"


class BoundaryError(PsypipeError, ValueError):
    category = "boundary"


class AlignmentError(PsypipeError, ValueError):
    category = "alignment"


class CapacityError(PsypipeError, ValueError):
    category = "capacity"


class CoverageError(PsypipeError, ValueError):
    category = "coverage"


class ProtocolError(PsypipeError, ValueError):
    category = "protocol"


class RequestValidationError(PsypipeError, ValueError):
    category = "validation"


class TransportError(PsypipeError):
    category = "transport"

    def __init__(self, message: str, attempts: int = 0):
        super().__init__(message)
        self.attempts = attempts


class TransientError(TransportError):
    """Raised by backends for retryable failures (timeouts, 429, 5xx)."""

    category = "transient"


class CredentialError(PsypipeError):
    category = "credential"


class RefusalError(PsypipeError):
    category = "refusal"

    def __init__(self, message: str, text: str = ""):
        super().__init__(message)
        self.text = text


class ScoreParseError(PsypipeError, ValueError):
    category = "parse"

    def __init__(self, message: str, missing=(), bad=()):
        super().__init__(message)
        self.missing = tuple(missing)
        self.bad = tuple(bad)


class NarrativeRejectedError(PsypipeError):
    category = "narrative-rejected"


class VerificationError(PsypipeError):
    category = "verification"


class SyntheticDecodeError(PsypipeError, ValueError):
    category = "decode"
