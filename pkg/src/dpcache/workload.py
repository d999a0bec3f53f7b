"""Toy tokenizer and a seeded generator of multiple-choice prompt workloads.

Prompts mimic the usual few-shot multiple-choice layout: a per-domain
instruction, ``N`` answered examples shared by every prompt in the domain,
and a distinct target question.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import NamedTuple

from dpcache.core import PromptLayout, fnv1a_64
from dpcache.engine import STOP_TOKEN
from dpcache.errors import InvalidInput

_SYLLABLES = (
    "ka", "lo", "mi", "ne", "ru", "ta", "vo", "si", "pe", "da", "zu", "fi",
    "gor", "bel", "tin", "mar", "sol", "ven", "qua", "rix", "lum", "ost",
)
LETTERS = "ABCD"


@dataclass(frozen=True)
class ToyTokenizer:
    """Whitespace tokenizer: each word maps to a hashed id in ``1..vocab-1``.

    Id 0 is reserved for the stop token.
    """

    vocab_size: int = 32000

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise InvalidInput("vocab_size must be >= 2")

    def token_id(self, word: str) -> int:
        tid = 1 + fnv1a_64(word.encode("utf-8")) % (self.vocab_size - 1)
        assert tid != STOP_TOKEN
        return tid

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self.token_id(w) for w in text.split())


@dataclass(frozen=True)
class WorkloadSpec:
    domains: int = 57
    examples_per_domain: int = 5
    questions_per_domain: int = 2
    max_question_words: int = 256
    seed: int = 0
    vocab_size: int = 32000
    min_question_words: int = 6
    typical_question_words: int = 40

    def __post_init__(self) -> None:
        if self.domains < 1 or self.questions_per_domain < 1:
            raise InvalidInput("need at least one domain and one question per domain")
        if self.examples_per_domain < 0:
            raise InvalidInput("examples_per_domain must be >= 0")
        if not 1 <= self.min_question_words <= self.max_question_words:
            raise InvalidInput("min_question_words must be in 1..max_question_words")


class Prompt(NamedTuple):
    domain: str
    layout: PromptLayout
    text: str


class _Gen:
    def __init__(self, seed: int):
        self.rng = random.Random(seed)

    def word(self) -> str:
        return "".join(self.rng.choice(_SYLLABLES) for _ in range(self.rng.randint(1, 3)))

    def words(self, n: int) -> str:
        return " ".join(self.word() for _ in range(n))

    def question(self, spec: WorkloadSpec) -> tuple[str, int]:
        hi = min(spec.max_question_words, spec.typical_question_words)
        lo = min(spec.min_question_words, hi)
        n = self.rng.randint(lo, hi)
        # rare long question, still within the cap
        if self.rng.random() < 0.05:
            n = self.rng.randint(hi, spec.max_question_words)
        return self.words(n), n

    def choices(self) -> str:
        return " ".join(f"{c}. {self.words(self.rng.randint(1, 4))}" for c in LETTERS)


def generate_workload(spec: WorkloadSpec) -> list[Prompt]:
    """Deterministic prompts grouped by domain, domain-major order."""
    g = _Gen(spec.seed)
    tok = ToyTokenizer(spec.vocab_size)
    prompts: list[Prompt] = []
    for d in range(spec.domains):
        domain = f"{g.word()}_{d:02d}"
        instruction = (
            f"The following are multiple choice questions with answers about {domain.replace('_', ' ')} ."
        )
        examples = []
        for _ in range(spec.examples_per_domain):
            q, _ = g.question(spec)
            examples.append(f"{q} {g.choices()} Answer: {g.rng.choice(LETTERS)}")
        for _ in range(spec.questions_per_domain):
            q, _ = g.question(spec)
            target = f"{q} {g.choices()} Answer:"
            layout = PromptLayout(
                tok.encode(instruction), tuple(tok.encode(e) for e in examples), tok.encode(target)
            )
            text = "\n\n".join([instruction, *examples, target])
            prompts.append(Prompt(domain, layout, text))
    return prompts


def question_word_counts(prompts: list[Prompt]) -> list[int]:
    """Words in each target question stem (choices and 'Answer:' excluded)."""
    out = []
    for p in prompts:
        target = p.text.split("\n\n")[-1]
        out.append(len(target.split(" A. ")[0].split()))
    return out


def layout_from_text(text: str, tokenizer: ToyTokenizer) -> PromptLayout:
    """Split a plain-text prompt on blank lines: instruction, examples, question."""
    parts = [p for p in (s.strip() for s in text.split("\n\n")) if p]
    if not parts:
        raise InvalidInput("empty prompt")
    if len(parts) == 1:
        return PromptLayout(tokenizer.encode(parts[0]))
    return PromptLayout(
        tokenizer.encode(parts[0]),
        tuple(tokenizer.encode(p) for p in parts[1:-1]),
        tokenizer.encode(parts[-1]),
    )
