"""Blob-cache server, wire protocol and client connectors."""

from dpcache.store.client import LocalConnector, StoreConnector, TcpConnector
from dpcache.store.protocol import StateBlob
from dpcache.store.server import DEFAULT_MAX_BLOB_BYTES, BlobServer, ServerState, serve

__all__ = [
    "DEFAULT_MAX_BLOB_BYTES",
    "BlobServer",
    "LocalConnector",
    "ServerState",
    "StateBlob",
    "StoreConnector",
    "TcpConnector",
    "serve",
]
