"""Split inference for two-phase video queries.

A cheap network indexes every frame with its Top-K classes and caches the
activation at a cut point.  At query time an expensive network that shares the
layers up to that cut resumes from the cached activation instead of from
pixels, optionally with its later layers retrained on the cheap model's
features.
"""

from .errors import (
    ConfigurationError,
    CutError,
    DimensionError,
    FingerprintError,
    FormatError,
    InputError,
    SpecSemanticError,
    SpecSyntaxError,
    SplitInferError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "CutError",
    "DimensionError",
    "FingerprintError",
    "FormatError",
    "InputError",
    "SpecSemanticError",
    "SpecSyntaxError",
    "SplitInferError",
    "__version__",
]
