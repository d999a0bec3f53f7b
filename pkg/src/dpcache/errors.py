"""Exception hierarchy shared across the package."""


class DPCacheError(Exception):
    """Base class for all errors raised by dpcache."""


class InvalidInput(DPCacheError, ValueError):
    pass


class DecodeError(DPCacheError, ValueError):
    """Malformed serialized data (catalog, blob, engine state, wire frame)."""


class CatalogMismatch(DPCacheError):
    """Catalog parameters differ; the local copy must be discarded."""


class StoreError(DPCacheError):
    """Server-side failure reported over the wire."""


class RejectedBlob(StoreError):
    pass


class TooLarge(StoreError):
    pass


class Unavailable(DPCacheError):
    """The cache server cannot be reached."""


class ProtocolError(DecodeError):
    pass
