"""Multimodal sensing simulator: replayed and live signal streams over TCP.

A hub process replays recorded datasets (or relays live publishers) to any
number of subscribed clients, applying per-subscription transform pipelines
(smoothing, noise, delays) on the way out. Everything on the wire is
newline-delimited JSON, so clients are a socket and a JSON parser away in any
language.
"""

from .model import (
    MISSING,
    MissingType,
    Sample,
    SampleValue,
    SignalDescriptor,
    Timestamp,
    TransformSpec,
    ValidationError,
    is_missing,
    validate_descriptor,
    validate_sample,
)

__version__ = "0.1.0"

__all__ = [
    "MISSING",
    "MissingType",
    "Sample",
    "SampleValue",
    "SignalDescriptor",
    "Timestamp",
    "TransformSpec",
    "ValidationError",
    "is_missing",
    "validate_descriptor",
    "validate_sample",
    "__version__",
]
