"""Inference-engine abstraction and a deterministic mock engine.

The mock engine's state is a rolling FNV-1a hash over every consumed token.
That makes "restore a saved prefix, then prefill the suffix" observably
equal to "prefill everything" (or not), without any model weights.  Costs
are virtual milliseconds returned to the caller; nothing sleeps.
"""

from __future__ import annotations

import bisect
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol, Sequence

from dpcache.core import FNV_OFFSET_BASIS, TokenSequence, fnv1a_64, pack_tokens
from dpcache.errors import DecodeError, InvalidInput

STOP_TOKEN = 0

STATE_MAGIC = b"DPCS"
STATE_FORMAT = 1
_STATE_HEAD = struct.Struct("<4sII")  # magic, format, token count -> 12 bytes
_STATE_TAIL = struct.Struct("<Q")


@dataclass(frozen=True)
class EngineCost:
    """Per-token virtual costs in milliseconds.

    ``prefill_schedule`` optionally makes prefill cost depend on token
    position: a sorted tuple of ``(start_position, ms_per_token)`` segments,
    the last one extending to infinity.  When empty, every prefilled token
    costs ``prefill_ms_per_token``.
    """

    prefill_ms_per_token: float = 0.0
    response_ms_per_token: float = 0.0
    sample_ms_per_token: float = 0.0
    tokenize_ms: float = 0.0
    prefill_schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self) -> None:
        for name in ("prefill_ms_per_token", "response_ms_per_token", "sample_ms_per_token", "tokenize_ms"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidInput(f"{name} must be finite and >= 0, got {v}")
        sched = tuple((int(s), float(r)) for s, r in self.prefill_schedule)
        if sched:
            starts = [s for s, _ in sched]
            if starts[0] != 0 or starts != sorted(set(starts)):
                raise InvalidInput("prefill_schedule must start at 0 and be strictly increasing")
            if any(not (math.isfinite(r) and r >= 0) for _, r in sched):
                raise InvalidInput("prefill_schedule rates must be finite and >= 0")
        object.__setattr__(self, "prefill_schedule", sched)

    def prefill_cost(self, start: int, n: int) -> float:
        """Cost of prefilling positions ``start .. start+n-1``."""
        if n <= 0:
            return 0.0
        if not self.prefill_schedule:
            return n * self.prefill_ms_per_token
        starts = [s for s, _ in self.prefill_schedule]
        end = start + n
        total = 0.0
        i = bisect.bisect_right(starts, start) - 1
        pos = start
        while pos < end:
            seg_end = starts[i + 1] if i + 1 < len(starts) else end
            upto = min(end, seg_end)
            total += (upto - pos) * self.prefill_schedule[i][1]
            pos = upto
            i += 1
        return total

    @classmethod
    def schedule_from_decode_times(
        cls, matched: Sequence[int], total_decode_ms: Sequence[float], **rates: float
    ) -> "EngineCost":
        """Fit a piecewise prefill schedule to measured (matched, decode time) points.

        ``total_decode_ms[i]`` is prefill of the unmatched suffix plus
        response decoding when ``matched[i]`` tokens were restored.  The
        segment between consecutive matched counts gets the per-token rate
        that reproduces the measured difference.  The smallest matched count
        is treated as position 0, i.e. an always-present BOS token is free.
        """
        pts = sorted(zip(matched, total_decode_ms))
        if len(pts) < 2:
            raise InvalidInput("need at least two measurements")
        pos = [0] + [m for m, _ in pts[1:]]
        sched = []
        for (m0, t0), (m1, t1), start, stop in zip(pts, pts[1:], pos, pos[1:]):
            if stop <= start:
                raise InvalidInput("matched counts must be strictly increasing")
            sched.append((start, (t0 - t1) / (stop - start)))
        return cls(prefill_schedule=tuple(sched), **rates)


@dataclass(frozen=True)
class EngineState:
    consumed: TokenSequence = ()
    digest_chain: int = FNV_OFFSET_BASIS

    def __len__(self) -> int:
        return len(self.consumed)


class Generation(NamedTuple):
    tokens: list[int]
    response_ms: float
    sample_ms: float
    state: EngineState

    @property
    def cost_ms(self) -> float:
        return self.response_ms + self.sample_ms


class Engine(Protocol):
    """What the orchestrator needs from an inference backend."""

    cost: EngineCost

    def empty_state(self) -> EngineState: ...

    def prefill(self, state: EngineState, tokens: Sequence[int]) -> tuple[EngineState, float]: ...

    def save_state(self, state: EngineState) -> bytes: ...

    def restore_state(self, payload: bytes) -> EngineState: ...

    def generate(self, state: EngineState, max_tokens: int) -> Generation: ...


def chain_digest(tokens: Sequence[int], h: int = FNV_OFFSET_BASIS) -> int:
    return fnv1a_64(pack_tokens(tokens), h)


@dataclass
class MockEngine:
    """Deterministic stand-in for a real LLM runtime.

    Greedy "sampling" picks ``digest_chain mod vocab_size``; the stop token
    (id 0) is emitted and ends generation.
    """

    vocab_size: int = 32000
    cost: EngineCost = field(default_factory=EngineCost)

    def empty_state(self) -> EngineState:
        return EngineState()

    def prefill(self, state: EngineState, tokens: Sequence[int]) -> tuple[EngineState, float]:
        if not tokens:
            return state, 0.0
        cost = self.cost.prefill_cost(len(state.consumed), len(tokens))
        new = EngineState(state.consumed + tuple(tokens), chain_digest(tokens, state.digest_chain))
        return new, cost

    def save_state(self, state: EngineState) -> bytes:
        return (
            _STATE_HEAD.pack(STATE_MAGIC, STATE_FORMAT, len(state.consumed))
            + pack_tokens(state.consumed)
            + _STATE_TAIL.pack(state.digest_chain)
        )

    def restore_state(self, payload: bytes) -> EngineState:
        return decode_state(payload)

    def generate(self, state: EngineState, max_tokens: int) -> Generation:
        if max_tokens < 1:
            raise InvalidInput("max_tokens must be >= 1")
        out: list[int] = []
        for _ in range(max_tokens):
            tok = state.digest_chain % self.vocab_size
            out.append(tok)
            state, _ = self.prefill(state, (tok,))
            if tok == STOP_TOKEN:
                break
        n = len(out)
        return Generation(out, n * self.cost.response_ms_per_token, n * self.cost.sample_ms_per_token, state)


def decode_state(payload: bytes) -> EngineState:
    """Parse a saved mock state, rejecting any corruption.

    The stored digest is recomputed from the stored tokens, so a flipped bit
    anywhere in the payload fails validation.
    """
    if len(payload) < _STATE_HEAD.size + _STATE_TAIL.size:
        raise DecodeError(f"state payload too short: {len(payload)} bytes")
    magic, fmt, count = _STATE_HEAD.unpack_from(payload)
    if magic != STATE_MAGIC:
        raise DecodeError(f"bad state magic {magic!r}")
    if fmt != STATE_FORMAT:
        raise DecodeError(f"unsupported state format {fmt}")
    expected = _STATE_HEAD.size + 4 * count + _STATE_TAIL.size
    if len(payload) != expected:
        raise DecodeError(f"state payload is {len(payload)} bytes, header implies {expected}")
    tokens = struct.unpack_from(f"<{count}I", payload, _STATE_HEAD.size)
    (digest,) = _STATE_TAIL.unpack_from(payload, expected - _STATE_TAIL.size)
    if chain_digest(tokens) != digest:
        raise DecodeError("state digest does not match its tokens")
    return EngineState(tokens, digest)


def state_payload_size(n_tokens: int) -> int:
    return _STATE_HEAD.size + 4 * n_tokens + _STATE_TAIL.size
