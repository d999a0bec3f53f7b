"""Client-side connectors to the cache box.

``TcpConnector`` speaks the wire protocol; ``LocalConnector`` calls a
:class:`ServerState` in-process and is what the benchmark harness uses by
default.  Both raise :class:`Unavailable` when the server cannot be reached
and report NOT_FOUND / NOT_MODIFIED as ``None``.
"""

from __future__ import annotations

import socket
import threading
from typing import Protocol

from dpcache.core import CacheKey
from dpcache.errors import DecodeError, ProtocolError, RejectedBlob, StoreError, TooLarge, Unavailable
from dpcache.store import protocol as proto
from dpcache.store.protocol import StateBlob, Status
from dpcache.store.server import ServerState, parse_address


class StoreConnector(Protocol):
    def put(self, key: CacheKey, blob: StateBlob) -> None: ...

    def get(self, key: CacheKey) -> StateBlob | None: ...

    def pull_catalog(self, since_version: int) -> tuple[int, bytes] | None: ...

    def ping(self) -> None: ...


class TcpConnector:
    """One connection, one in-flight request at a time.

    The socket is opened lazily and dropped on any transport error so the
    next call reconnects; this is what lets a client ride out a server
    restart.
    """

    def __init__(self, address: str | tuple[str, int], timeout: float = 10.0):
        self.address = parse_address(address) if isinstance(address, str) else address
        self.timeout = timeout
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise Unavailable(f"cannot connect to {self.address}: {exc}") from None
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self._sock

    def _read(self, n: int) -> bytes:
        assert self._sock is not None
        buf = bytearray()
        while len(buf) < n:
            chunk = self._sock.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                raise ConnectionError("server closed the connection")
            buf += chunk
        return bytes(buf)

    def _call(self, request: bytes, handle):
        with self._lock:
            try:
                sock = self._connect()
                sock.sendall(request)
                status = proto.read_u8(self._read)
                if status == Status.ERR:
                    n = proto.read_u16(self._read)
                    _raise_remote(self._read(n).decode("utf-8", "replace"))
                return handle(Status(status))
            except (OSError, ConnectionError) as exc:
                self.close()
                raise Unavailable(f"{self.address}: {exc}") from None
            except ValueError as exc:
                self.close()
                raise ProtocolError(f"unexpected response: {exc}") from None

    def put(self, key: CacheKey, blob: StateBlob) -> None:
        self.put_raw(key, blob.encode())

    def put_raw(self, key: CacheKey, blob_bytes: bytes) -> None:
        self._call(proto.encode_put(key, blob_bytes), lambda st: None)

    def get_raw(self, key: CacheKey) -> bytes | None:
        def handle(st: Status):
            if st is Status.NOT_FOUND:
                return None
            return self._read(proto.read_u32(self._read))

        return self._call(proto.encode_get(key), handle)

    def get(self, key: CacheKey) -> StateBlob | None:
        raw = self.get_raw(key)
        return None if raw is None else StateBlob.decode(raw)

    def pull_catalog(self, since_version: int) -> tuple[int, bytes] | None:
        def handle(st: Status):
            if st is Status.NOT_MODIFIED:
                return None
            version = proto.read_u64(self._read)
            return version, self._read(proto.read_u32(self._read))

        return self._call(proto.encode_catalog_pull(since_version), handle)

    def ping(self) -> None:
        self._call(proto.encode_ping(), lambda st: None)

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self) -> "TcpConnector":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _raise_remote(reason: str) -> None:
    tag = reason.split(":", 1)[0]
    if tag == proto.REASON_REJECTED:
        raise RejectedBlob(reason)
    if tag == proto.REASON_TOO_LARGE:
        raise TooLarge(reason)
    raise StoreError(reason)


class LocalConnector:
    """In-process connector with a switch for simulating outages."""

    def __init__(self, state: ServerState):
        self.state = state
        self.available = True
        self.requests = 0
        self.bytes_received = 0

    def _check(self) -> None:
        self.requests += 1
        if not self.available:
            raise Unavailable("server marked unavailable")

    def put(self, key: CacheKey, blob: StateBlob) -> None:
        self._check()
        self.state.put(key, blob.encode())

    def get(self, key: CacheKey) -> StateBlob | None:
        self._check()
        raw = self.state.get(key)
        if raw is None:
            return None
        self.bytes_received += len(raw)
        try:
            return StateBlob.decode(raw)
        except DecodeError:
            return None

    def pull_catalog(self, since_version: int) -> tuple[int, bytes] | None:
        self._check()
        pulled = self.state.pull_catalog(since_version)
        if pulled is not None:
            self.bytes_received += len(pulled[1])
        return pulled

    def ping(self) -> None:
        self._check()
