"""Binary formats for state blobs and the request/response wire protocol.

All integers on the wire are big-endian.  A request is ``b"DPC1"``, an
opcode byte and an opcode-specific body; a response is a status byte and a
status-specific body.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

from dpcache.core import CacheKey, ModelMeta, TokenSequence, cache_key
from dpcache.errors import DecodeError, ProtocolError

REQUEST_MAGIC = b"DPC1"


class Op(enum.IntEnum):
    PUT = 0x01
    GET = 0x02
    CATALOG_PULL = 0x03
    PING = 0x05


class Status(enum.IntEnum):
    OK = 0x80
    NOT_FOUND = 0x81
    NOT_MODIFIED = 0x82
    ERR = 0x8F


# ERR reasons start with one of these tags so clients can map them back
REASON_REJECTED = "rejected"
REASON_TOO_LARGE = "too_large"
REASON_BAD_REQUEST = "bad_request"

_U8 = struct.Struct(">B")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_BLOB_HEAD = struct.Struct(">QI")


@dataclass(frozen=True)
class StateBlob:
    """An engine state plus the information needed to validate it on download."""

    meta_digest: int
    prefix: TokenSequence
    payload: bytes

    def __post_init__(self) -> None:
        object.__setattr__(self, "prefix", tuple(self.prefix))

    @classmethod
    def build(cls, meta: ModelMeta, prefix: Sequence[int], payload: bytes) -> "StateBlob":
        return cls(cache_key(meta, prefix).digest, tuple(prefix), payload)

    def encode(self) -> bytes:
        n = len(self.prefix)
        return b"".join((
            _BLOB_HEAD.pack(self.meta_digest, n),
            struct.pack(f">{n}I", *self.prefix),
            _U32.pack(len(self.payload)),
            self.payload,
        ))

    @classmethod
    def decode(cls, data: bytes) -> "StateBlob":
        if len(data) < _BLOB_HEAD.size:
            raise DecodeError("blob shorter than its header")
        digest, n = _BLOB_HEAD.unpack_from(data)
        off = _BLOB_HEAD.size
        if len(data) < off + 4 * n + 4:
            raise DecodeError(f"blob truncated inside prefix of {n} tokens")
        prefix = struct.unpack_from(f">{n}I", data, off)
        off += 4 * n
        (plen,) = _U32.unpack_from(data, off)
        off += 4
        if len(data) != off + plen:
            raise DecodeError(f"blob payload length {plen} disagrees with {len(data) - off} remaining bytes")
        return cls(digest, prefix, bytes(data[off:]))

    def matches(self, key: CacheKey, meta: ModelMeta, prefix: Sequence[int]) -> bool:
        """Client-side validation: right key, right model, right tokens."""
        if self.meta_digest != key.digest or self.prefix != tuple(prefix):
            return False
        return cache_key(meta, self.prefix) == key


# -- requests ---------------------------------------------------------------

def encode_put(key: CacheKey, blob_bytes: bytes) -> bytes:
    return REQUEST_MAGIC + _U8.pack(Op.PUT) + _U64.pack(key.digest) + _U32.pack(len(blob_bytes)) + blob_bytes


def encode_get(key: CacheKey) -> bytes:
    return REQUEST_MAGIC + _U8.pack(Op.GET) + _U64.pack(key.digest)


def encode_catalog_pull(since_version: int) -> bytes:
    return REQUEST_MAGIC + _U8.pack(Op.CATALOG_PULL) + _U64.pack(since_version)


def encode_ping() -> bytes:
    return REQUEST_MAGIC + _U8.pack(Op.PING)


# -- responses --------------------------------------------------------------

def encode_status(status: Status, body: bytes = b"") -> bytes:
    return _U8.pack(status) + body


def encode_error(reason: str) -> bytes:
    raw = reason.encode("utf-8")[:0xFFFF]
    return _U8.pack(Status.ERR) + _U16.pack(len(raw)) + raw


def encode_get_ok(blob_bytes: bytes) -> bytes:
    return _U8.pack(Status.OK) + _U32.pack(len(blob_bytes)) + blob_bytes


def encode_catalog_ok(version: int, catalog_bytes: bytes) -> bytes:
    return _U8.pack(Status.OK) + _U64.pack(version) + _U32.pack(len(catalog_bytes)) + catalog_bytes


# -- stream helpers ---------------------------------------------------------

Reader = Callable[[int], bytes]


def read_u8(read: Reader) -> int:
    return read(1)[0]


def read_u16(read: Reader) -> int:
    return _U16.unpack(read(2))[0]


def read_u32(read: Reader) -> int:
    return _U32.unpack(read(4))[0]


def read_u64(read: Reader) -> int:
    return _U64.unpack(read(8))[0]


def read_request_head(read: Reader) -> Op:
    magic = read(4)
    if magic != REQUEST_MAGIC:
        raise ProtocolError(f"bad request magic {magic!r}")
    code = read_u8(read)
    try:
        return Op(code)
    except ValueError:
        raise ProtocolError(f"unknown opcode 0x{code:02x}") from None
