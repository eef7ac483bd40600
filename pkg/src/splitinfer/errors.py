"""Exception hierarchy shared by every splitinfer module."""


class SplitInferError(Exception):
    """Base class for all errors raised by splitinfer."""


class DimensionError(SplitInferError, ValueError):
    """Array shapes do not line up."""


class ConfigurationError(SplitInferError, ValueError):
    """A layer or run configuration is not realisable (e.g. non-integral output size)."""


class InputError(SplitInferError, ValueError):
    """Bad caller-supplied values such as out-of-range labels or k."""


class SpecSyntaxError(SplitInferError, ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class SpecSemanticError(SplitInferError, ValueError):
    """A parsed model spec violates a structural invariant."""


class CutError(SplitInferError, ValueError):
    """A cut point is out of range or incompatible between two models."""


class FormatError(SplitInferError, ValueError):
    """A binary or text file is malformed, truncated or fails its checksum."""


class FingerprintError(FormatError):
    """Stored fingerprint does not match the expected model or cut."""
