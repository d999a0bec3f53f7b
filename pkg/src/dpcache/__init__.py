"""Distributed prompt caching for edge LLM clients."""

from dpcache.core import (
    CacheKey,
    ModelMeta,
    PrefixRange,
    PromptLayout,
    RangeLabel,
    cache_key,
    canonical_bytes,
    derive_ranges,
    fnv1a_64,
)
from dpcache.errors import (
    CatalogMismatch,
    DecodeError,
    DPCacheError,
    InvalidInput,
    RejectedBlob,
    StoreError,
    TooLarge,
    Unavailable,
)

__version__ = "0.1.0"

__all__ = [
    "CacheKey",
    "CatalogMismatch",
    "DPCacheError",
    "DecodeError",
    "InvalidInput",
    "ModelMeta",
    "PrefixRange",
    "PromptLayout",
    "RangeLabel",
    "RejectedBlob",
    "StoreError",
    "TooLarge",
    "Unavailable",
    "cache_key",
    "canonical_bytes",
    "derive_ranges",
    "fnv1a_64",
]
