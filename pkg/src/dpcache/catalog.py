"""Bloom-filter catalog of cache keys held by the server.

Clients keep a local copy and probe it before touching the network; the
server keeps the master copy and bumps its version on every upload.  Local
copies catch up by OR-merging a pulled master bitmap.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from dpcache.core import FNV_OFFSET_BASIS, FNV_PRIME, CacheKey, fnv1a_64
from dpcache.errors import CatalogMismatch, DecodeError, InvalidInput

MAGIC = b"DPCB"
FORMAT_VERSION = 1
_HEADER = struct.Struct(">4sB3xQQIQ")
HEADER_SIZE = _HEADER.size  # 36


@dataclass(frozen=True)
class CatalogParams:
    capacity_n: int
    target_fpr_p: float
    bit_count_m: int
    hash_count_k: int

    @classmethod
    def for_capacity(cls, capacity_n: int, target_fpr_p: float) -> "CatalogParams":
        if capacity_n < 1:
            raise InvalidInput("capacity_n must be >= 1")
        if not 0.0 < target_fpr_p < 1.0:
            raise InvalidInput("target_fpr_p must be in (0, 1)")
        m = math.ceil(-capacity_n * math.log(target_fpr_p) / (math.log(2) ** 2))
        k = max(1, round(m / capacity_n * math.log(2)))
        return cls(capacity_n, target_fpr_p, m, k)

    @property
    def byte_count(self) -> int:
        return (self.bit_count_m + 7) // 8

    def same_shape(self, other: "CatalogParams") -> bool:
        """Bitmaps are interchangeable iff (n, m, k) agree; the FPR is derived."""
        return (self.capacity_n, self.bit_count_m, self.hash_count_k) == (
            other.capacity_n, other.bit_count_m, other.hash_count_k)

    def expected_fpr(self, n_inserted: int) -> float:
        """Standard approximation (1 - e^{-kn/m})^k."""
        k, m = self.hash_count_k, self.bit_count_m
        return (1.0 - math.exp(-k * n_inserted / m)) ** k


def _second_hash(digest: int) -> int:
    return fnv1a_64(digest.to_bytes(8, "little")) | 1


def bit_positions(key: CacheKey, m: int, k: int) -> list[int]:
    """Double-hashing positions ``(h1 + i*h2) mod m`` for ``i < k``.

    Arithmetic is exact (no 64-bit wraparound), so any implementation with
    big enough integers reproduces the same positions.
    """
    h1 = key.digest % m
    h2 = _second_hash(key.digest) % m
    return [(h1 + i * h2) % m for i in range(k)]


def _bulk_positions(digests: np.ndarray, m: int, k: int) -> np.ndarray:
    """Vectorized :func:`bit_positions`; returns an array of shape (k, len)."""
    d = digests.astype(np.uint64)
    h = np.full(d.shape, FNV_OFFSET_BASIS, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    with np.errstate(over="ignore"):
        for shift in range(0, 64, 8):
            h ^= (d >> np.uint64(shift)) & np.uint64(0xFF)
            h *= prime
    h2 = (h | np.uint64(1)) % np.uint64(m)
    h1 = d % np.uint64(m)
    # m < 2**32 keeps i*h2 and the sum well inside uint64
    i = np.arange(k, dtype=np.uint64)[:, None]
    return (h1[None, :] + i * h2[None, :]) % np.uint64(m)


class Catalog:
    """Bloom filter with a version counter.

    Probes, inserts and merges serialize on an internal lock; a merge builds
    the OR-ed bitmap aside and swaps it in, so a concurrent probe observes
    either the old or the new bitmap, never a mix.
    """

    def __init__(self, params: CatalogParams, bits: bytes | bytearray | None = None, version: int = 0):
        self.params = params
        if bits is None:
            bits = bytearray(params.byte_count)
        elif len(bits) != params.byte_count:
            raise CatalogMismatch(f"bitmap is {len(bits)} bytes, expected {params.byte_count}")
        self._bits = bytearray(bits)
        self.version = version
        self.inserted_count = 0
        self._lock = threading.Lock()

    @classmethod
    def new(cls, capacity_n: int = 1_000_000, target_fpr_p: float = 0.01) -> "Catalog":
        return cls(CatalogParams.for_capacity(capacity_n, target_fpr_p))

    @property
    def bits(self) -> bytes:
        with self._lock:
            return bytes(self._bits)

    @property
    def size_bytes(self) -> int:
        return len(self._bits)

    def insert(self, key: CacheKey) -> None:
        positions = bit_positions(key, self.params.bit_count_m, self.params.hash_count_k)
        with self._lock:
            bits = self._bits
            for p in positions:
                bits[p >> 3] |= 1 << (p & 7)
            self.version += 1
            self.inserted_count += 1

    def contains(self, key: CacheKey) -> bool:
        positions = bit_positions(key, self.params.bit_count_m, self.params.hash_count_k)
        with self._lock:
            bits = self._bits
            return all(bits[p >> 3] >> (p & 7) & 1 for p in positions)

    __contains__ = contains

    def insert_many(self, keys: Iterable[CacheKey | int]) -> None:
        """Bulk insert; bit-identical to calling :meth:`insert` per key."""
        digests = np.fromiter((k.digest if isinstance(k, CacheKey) else k for k in keys), dtype=np.uint64)
        if digests.size == 0:
            return
        pos = _bulk_positions(digests, self.params.bit_count_m, self.params.hash_count_k).ravel()
        with self._lock:
            arr = np.frombuffer(self._bits, dtype=np.uint8)
            np.bitwise_or.at(arr, (pos >> np.uint64(3)).astype(np.int64),
                             (np.uint8(1) << (pos & np.uint64(7)).astype(np.uint8)))
            self.version += int(digests.size)
            self.inserted_count += int(digests.size)

    def contains_many(self, keys: Iterable[CacheKey | int]) -> np.ndarray:
        digests = np.fromiter((k.digest if isinstance(k, CacheKey) else k for k in keys), dtype=np.uint64)
        pos = _bulk_positions(digests, self.params.bit_count_m, self.params.hash_count_k)
        with self._lock:
            arr = np.frombuffer(bytes(self._bits), dtype=np.uint8)
        hit = (arr[(pos >> np.uint64(3)).astype(np.int64)] >> (pos & np.uint64(7)).astype(np.uint8)) & 1
        return hit.all(axis=0)

    def merge_from(self, master_bits: bytes, master_version: int) -> None:
        if len(master_bits) != len(self._bits):
            raise CatalogMismatch(
                f"master bitmap is {len(master_bits)} bytes, local is {len(self._bits)}"
            )
        incoming = np.frombuffer(master_bits, dtype=np.uint8)
        with self._lock:
            merged = np.bitwise_or(np.frombuffer(self._bits, dtype=np.uint8), incoming)
            self._bits = bytearray(merged.tobytes())
            self.version = max(self.version, master_version)

    def reset_from(self, other: "Catalog") -> None:
        """Adopt another catalog's parameters, bitmap and version wholesale."""
        params, bits, version = other.params, other.bits, other.version
        with self._lock:
            self.params = params
            self._bits = bytearray(bits)
            self.version = version

    def merge(self, other: "Catalog") -> None:
        if not other.params.same_shape(self.params):
            raise CatalogMismatch(f"{other.params} != {self.params}")
        self.merge_from(other.bits, other.version)

    def fill_ratio(self) -> float:
        with self._lock:
            ones = int(np.unpackbits(np.frombuffer(self._bits, dtype=np.uint8)).sum())
        return ones / self.params.bit_count_m

    def serialize(self) -> bytes:
        p = self.params
        with self._lock:
            header = _HEADER.pack(MAGIC, FORMAT_VERSION, p.capacity_n, p.bit_count_m, p.hash_count_k, self.version)
            return header + bytes(self._bits)

    @classmethod
    def deserialize(cls, data: bytes, target_fpr_p: float | None = None) -> "Catalog":
        """Inverse of :meth:`serialize`.

        The wire format does not carry the target FPR; it is recovered from
        ``(n, m)`` unless given explicitly.
        """
        if len(data) < HEADER_SIZE:
            raise DecodeError(f"catalog too short: {len(data)} bytes")
        magic, fmt, n, m, k, version = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise DecodeError(f"bad catalog magic {magic!r}")
        if fmt != FORMAT_VERSION:
            raise DecodeError(f"unsupported catalog format {fmt}")
        if data[5:8] != b"\x00\x00\x00":
            raise DecodeError("reserved header bytes must be zero")
        if n < 1 or m < 1 or k < 1:
            raise DecodeError(f"invalid catalog parameters n={n} m={m} k={k}")
        body = data[HEADER_SIZE:]
        if len(body) != (m + 7) // 8:
            raise DecodeError(f"bitmap length {len(body)} does not match m={m}")
        if target_fpr_p is None:
            target_fpr_p = math.exp(-m * math.log(2) ** 2 / n)
        params = CatalogParams(n, target_fpr_p, m, k)
        return cls(params, body, version)

    def copy(self) -> "Catalog":
        with self._lock:
            c = Catalog(self.params, self._bits, self.version)
            c.inserted_count = self.inserted_count
        return c

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Catalog):
            return NotImplemented
        return (
            self.params.same_shape(other.params)
            and self.version == other.version
            and self.bits == other.bits
        )

    def __repr__(self) -> str:
        p = self.params
        return f"Catalog(n={p.capacity_n}, m={p.bit_count_m}, k={p.hash_count_k}, version={self.version})"


def new_catalog(capacity_n: int, target_fpr_p: float) -> Catalog:
    return Catalog.new(capacity_n, target_fpr_p)
