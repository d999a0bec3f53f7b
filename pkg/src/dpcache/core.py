"""Token sequences, prompt structure, model metadata and cache-key hashing.

Every other module addresses cached states through :func:`cache_key`, so
the byte layout produced by :func:`canonical_bytes` is a compatibility
surface: changing it invalidates every catalog and blob in existence.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from dpcache.errors import InvalidInput

FNV_OFFSET_BASIS = 14695981039346656037
FNV_PRIME = 1099511628211
MASK64 = 0xFFFFFFFFFFFFFFFF
MAX_TOKEN_ID = 0xFFFFFFFF

TokenSequence = tuple[int, ...]


def fnv1a_64(data: bytes, h: int = FNV_OFFSET_BASIS) -> int:
    """FNV-1a 64-bit hash of ``data``, optionally continuing from state ``h``."""
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & MASK64
    return h


def pack_tokens(tokens: Sequence[int]) -> bytes:
    """Little-endian u32 encoding used for hashing and digest chains."""
    try:
        return struct.pack(f"<{len(tokens)}I", *tokens)
    except struct.error as exc:
        raise InvalidInput(f"token id out of u32 range: {exc}") from None


@dataclass(frozen=True)
class ModelMeta:
    """Model identity folded into every cache key.

    ``config_params`` is normalized to sorted order on construction; duplicate
    keys are rejected because they would make the canonical form ambiguous.
    """

    model_name: str
    config_params: tuple[tuple[str, str], ...] = ()
    vocab_size: int = 32000

    def __post_init__(self) -> None:
        params = tuple(sorted((str(k), str(v)) for k, v in self.config_params))
        keys = [k for k, _ in params]
        if len(set(keys)) != len(keys):
            raise InvalidInput(f"duplicate config keys in {keys}")
        if self.vocab_size <= 0:
            raise InvalidInput("vocab_size must be positive")
        object.__setattr__(self, "config_params", params)

    @classmethod
    def from_dict(cls, model_name: str, params: dict[str, object], vocab_size: int) -> "ModelMeta":
        return cls(model_name, tuple((k, str(v)) for k, v in params.items()), vocab_size)


class RangeLabel(enum.IntEnum):
    """Prompt range kinds, ordered by how much of the prompt they cover."""

    INSTRUCTION_ONLY = 1
    INSTRUCTION_PLUS_FIRST_EXAMPLE = 2
    INSTRUCTION_PLUS_ALL_EXAMPLES = 3
    FULL_PROMPT = 4


@dataclass(frozen=True)
class PrefixRange:
    end_index: int
    label: RangeLabel


@dataclass(frozen=True)
class PromptLayout:
    """A prompt split into instruction, few-shot examples and target question."""

    instruction: TokenSequence
    examples: tuple[TokenSequence, ...] = ()
    question: TokenSequence = ()
    _full: TokenSequence = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "instruction", tuple(self.instruction))
        object.__setattr__(self, "examples", tuple(tuple(e) for e in self.examples))
        object.__setattr__(self, "question", tuple(self.question))
        full: list[int] = list(self.instruction)
        for ex in self.examples:
            full.extend(ex)
        full.extend(self.question)
        object.__setattr__(self, "_full", tuple(full))

    def full(self) -> TokenSequence:
        return self._full

    def __len__(self) -> int:
        return len(self._full)

    def boundaries(self) -> list[int]:
        """Cumulative segment end offsets (instruction, each example, question)."""
        ends = [len(self.instruction)]
        for ex in self.examples:
            ends.append(ends[-1] + len(ex))
        ends.append(ends[-1] + len(self.question))
        return ends


@dataclass(frozen=True, order=True)
class CacheKey:
    digest: int

    def __post_init__(self) -> None:
        if not 0 <= self.digest <= MASK64:
            raise InvalidInput(f"digest out of u64 range: {self.digest}")

    def __str__(self) -> str:
        return f"{self.digest:016x}"


def canonical_bytes(meta: ModelMeta, prefix: Sequence[int]) -> bytes:
    """Serialize ``(meta, prefix)`` into the hash input.

    Layout: name, 0x00, then ``key 0x01 value 0x01`` per config pair, 0x00,
    then each token as u32 little-endian.
    """
    if len(prefix) == 0:
        raise InvalidInput("prefix must be non-empty")
    for t in prefix:
        if not 0 <= t < meta.vocab_size:
            raise InvalidInput(f"token {t} outside vocabulary of size {meta.vocab_size}")
    parts = [meta.model_name.encode("utf-8"), b"\x00"]
    for k, v in meta.config_params:
        parts += [k.encode("utf-8"), b"\x01", v.encode("utf-8"), b"\x01"]
    parts.append(b"\x00")
    parts.append(pack_tokens(prefix))
    return b"".join(parts)


def cache_key(meta: ModelMeta, prefix: Sequence[int]) -> CacheKey:
    return CacheKey(fnv1a_64(canonical_bytes(meta, prefix)))


def derive_ranges(layout: PromptLayout) -> list[PrefixRange]:
    """Candidate cacheable prefixes of ``layout`` in increasing length.

    When two candidates end at the same token the one with the larger label
    wins, e.g. with a single example the first-example and all-examples
    ranges coincide and only the latter is kept.
    """
    if not layout.instruction:
        raise InvalidInput("instruction must be non-empty")
    n_instr = len(layout.instruction)
    candidates: list[tuple[int, RangeLabel]] = [(n_instr, RangeLabel.INSTRUCTION_ONLY)]
    if layout.examples:
        ends = layout.boundaries()
        candidates.append((ends[1], RangeLabel.INSTRUCTION_PLUS_FIRST_EXAMPLE))
        candidates.append((ends[-2], RangeLabel.INSTRUCTION_PLUS_ALL_EXAMPLES))
    candidates.append((len(layout), RangeLabel.FULL_PROMPT))

    by_end: dict[int, RangeLabel] = {}
    for end, label in candidates:
        by_end[end] = max(label, by_end.get(end, label))
    return [PrefixRange(end, by_end[end]) for end in sorted(by_end)]


def prefix_keys(meta: ModelMeta, tokens: Sequence[int], ends: Iterable[int]) -> list[CacheKey]:
    """``cache_key(meta, tokens[:e])`` for each ``e`` in one streaming pass.

    FNV-1a is a left fold, so the digest of a longer prefix continues from
    the digest of a shorter one; equivalent to calling :func:`cache_key`
    per end but linear in ``len(tokens)`` overall.
    """
    ends = list(ends)
    if not ends:
        return []
    if min(ends) <= 0 or max(ends) > len(tokens):
        raise InvalidInput(f"prefix ends {ends} outside 1..{len(tokens)}")
    # header = canonical_bytes minus the token section
    header = canonical_bytes(meta, tokens[:1])[:-4]
    limit = max(ends)
    for t in tokens[:limit]:
        if not 0 <= t < meta.vocab_size:
            raise InvalidInput(f"token {t} outside vocabulary of size {meta.vocab_size}")
    h = fnv1a_64(header)
    at: dict[int, int] = {}
    packed = pack_tokens(tokens[:limit])
    wanted = set(ends)
    for i in range(limit):
        h = fnv1a_64(packed[4 * i : 4 * i + 4], h)
        if i + 1 in wanted:
            at[i + 1] = h
    return [CacheKey(at[e]) for e in ends]
