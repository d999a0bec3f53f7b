"""The cache box: blob storage, master catalog and a threaded TCP front end."""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import struct
import threading
from pathlib import Path

from dpcache.catalog import Catalog
from dpcache.core import CacheKey
from dpcache.errors import DecodeError, ProtocolError, RejectedBlob, TooLarge
from dpcache.store import protocol as proto
from dpcache.store.protocol import Op, StateBlob, Status

logger = logging.getLogger(__name__)

DEFAULT_MAX_BLOB_BYTES = 64 * 1024 * 1024

_AOF_MAGIC = b"DPCA"
_AOF_RECORD = struct.Struct(">4sQI")


class ServerState:
    """Blobs keyed by cache key plus the master catalog.

    Every mutation happens under one lock, and a stored key is always
    inserted into the catalog inside the same critical section, so the
    catalog never under-approximates the store.
    """

    def __init__(
        self,
        catalog: Catalog | None = None,
        max_blob_bytes: int = DEFAULT_MAX_BLOB_BYTES,
        persist_path: str | os.PathLike | None = None,
    ):
        self.catalog = catalog if catalog is not None else Catalog.new()
        self.max_blob_bytes = max_blob_bytes
        self._blobs: dict[int, bytes] = {}
        self._lock = threading.Lock()
        self._aof = None
        if persist_path is not None:
            self._replay(Path(persist_path))
            self._aof = open(persist_path, "ab")

    def _replay(self, path: Path) -> None:
        if not path.exists():
            return
        data = path.read_bytes()
        off = 0
        while off + _AOF_RECORD.size <= len(data):
            magic, key, n = _AOF_RECORD.unpack_from(data, off)
            end = off + _AOF_RECORD.size + n
            if magic != _AOF_MAGIC or end > len(data):
                logger.warning("truncated append-only file %s at offset %d, ignoring tail", path, off)
                break
            self._blobs[key] = data[off + _AOF_RECORD.size : end]
            self.catalog.insert(CacheKey(key))
            off = end
        logger.info("replayed %d blobs from %s", len(self._blobs), path)

    def validate(self, key: CacheKey, blob_bytes: bytes) -> None:
        if len(blob_bytes) > self.max_blob_bytes:
            raise TooLarge(f"blob of {len(blob_bytes)} bytes exceeds limit {self.max_blob_bytes}")
        try:
            blob = StateBlob.decode(blob_bytes)
        except DecodeError as exc:
            raise RejectedBlob(f"malformed blob: {exc}") from None
        if blob.meta_digest != key.digest:
            raise RejectedBlob(f"blob digest {blob.meta_digest:016x} does not match key {key}")

    def put(self, key: CacheKey, blob_bytes: bytes) -> None:
        self.validate(key, blob_bytes)
        blob_bytes = bytes(blob_bytes)
        with self._lock:
            self._blobs[key.digest] = blob_bytes
            self.catalog.insert(key)
            if self._aof is not None:
                self._aof.write(_AOF_RECORD.pack(_AOF_MAGIC, key.digest, len(blob_bytes)) + blob_bytes)
                self._aof.flush()

    def get(self, key: CacheKey) -> bytes | None:
        with self._lock:
            return self._blobs.get(key.digest)

    def pull_catalog(self, since_version: int) -> tuple[int, bytes] | None:
        with self._lock:
            if self.catalog.version <= since_version:
                return None
            return self.catalog.version, self.catalog.serialize()

    @property
    def version(self) -> int:
        return self.catalog.version

    def keys(self) -> list[CacheKey]:
        with self._lock:
            return [CacheKey(k) for k in self._blobs]

    def __len__(self) -> int:
        return len(self._blobs)

    def clear(self) -> None:
        """Drop every blob and reset the master catalog (test/bench helper)."""
        with self._lock:
            self._blobs.clear()
            self.catalog = Catalog(self.catalog.params)

    def close(self) -> None:
        if self._aof is not None:
            self._aof.close()
            self._aof = None


class _Handler(socketserver.BaseRequestHandler):
    server: "_TCPServer"

    def setup(self) -> None:
        self.server.track(self.request)

    def finish(self) -> None:
        self.server.untrack(self.request)

    def _read(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.request.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                raise EOFError
            buf += chunk
        return bytes(buf)

    def handle(self) -> None:
        state = self.server.state
        sock = self.request
        try:
            while True:
                try:
                    head = self.request.recv(1, socket.MSG_PEEK)
                except OSError:
                    return
                if not head:
                    return
                op = proto.read_request_head(self._read)
                sock.sendall(self._dispatch(op, state))
        except ProtocolError as exc:
            logger.info("closing connection from %s: %s", self.client_address, exc)
        except (EOFError, ConnectionError, OSError):
            pass

    def _dispatch(self, op: Op, state: ServerState) -> bytes:
        if op is Op.PING:
            return proto.encode_status(Status.OK)
        if op is Op.GET:
            blob = state.get(CacheKey(proto.read_u64(self._read)))
            if blob is None:
                return proto.encode_status(Status.NOT_FOUND)
            return proto.encode_get_ok(blob)
        if op is Op.CATALOG_PULL:
            pulled = state.pull_catalog(proto.read_u64(self._read))
            if pulled is None:
                return proto.encode_status(Status.NOT_MODIFIED)
            return proto.encode_catalog_ok(*pulled)
        # PUT
        key = CacheKey(proto.read_u64(self._read))
        n = proto.read_u32(self._read)
        if n > state.max_blob_bytes:
            # drain so the stream stays framed
            remaining = n
            while remaining:
                remaining -= len(self._read(min(remaining, 1 << 20)))
            return proto.encode_error(f"{proto.REASON_TOO_LARGE}: {n} bytes > {state.max_blob_bytes}")
        blob_bytes = self._read(n)
        try:
            state.put(key, blob_bytes)
        except RejectedBlob as exc:
            return proto.encode_error(f"{proto.REASON_REJECTED}: {exc}")
        except TooLarge as exc:
            return proto.encode_error(f"{proto.REASON_TOO_LARGE}: {exc}")
        return proto.encode_status(Status.OK)


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    block_on_close = False

    def __init__(self, address, state: ServerState):
        self.state = state
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        super().__init__(address, _Handler)

    def track(self, sock: socket.socket) -> None:
        with self._conns_lock:
            self._conns.add(sock)

    def untrack(self, sock: socket.socket) -> None:
        with self._conns_lock:
            self._conns.discard(sock)

    def drop_connections(self) -> None:
        with self._conns_lock:
            conns = list(self._conns)
        for s in conns:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


class BlobServer:
    """Runs the TCP front end for a :class:`ServerState` on a background thread.

    >>> srv = BlobServer(ServerState(Catalog.new(1000, 0.01)))   # doctest: +SKIP
    >>> srv.start(); host, port = srv.address                    # doctest: +SKIP
    """

    def __init__(self, state: ServerState | None = None, bind: str = "127.0.0.1:0"):
        self.state = state if state is not None else ServerState()
        self._bind = parse_address(bind)
        self._server: _TCPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        if self._server is None:
            raise RuntimeError("server not started")
        return self._server.server_address[:2]

    @property
    def address_str(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def start(self) -> "BlobServer":
        self._server = _TCPServer(self._bind, self.state)
        if self._bind[1] == 0:
            # rebind to the same port on restart
            self._bind = self._server.server_address[:2]
        self._thread = threading.Thread(target=self._server.serve_forever, name="dpcache-server", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._server is None:
            return
        self._server.shutdown()
        self._server.drop_connections()
        self._server.server_close()
        self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._server = _TCPServer(self._bind, self.state)
        logger.info("serving on %s:%d", *self._server.server_address[:2])
        try:
            self._server.serve_forever()
        finally:
            self._server.server_close()

    def __enter__(self) -> "BlobServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(bind: str, state: ServerState) -> None:
    """Blocking entry point used by the CLI."""
    BlobServer(state, bind).serve_forever()
