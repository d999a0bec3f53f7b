import sys
import random

import pytest

from dpcache.catalog import Catalog
from dpcache.core import ModelMeta, PromptLayout
from dpcache.store import BlobServer, ServerState


@pytest.fixture
def meta():
    return ModelMeta("gemma-mock", (("quant", "q8_0"), ("ctx", "2048")), vocab_size=1000)


@pytest.fixture
def small_catalog():
    return Catalog.new(10_000, 0.01)


@pytest.fixture
def server():
    srv = BlobServer(ServerState(Catalog.new(10_000, 0.01))).start()
    yield srv
    srv.stop()


def random_layout(rng: random.Random, vocab: int = 1000, n_examples: int | None = None) -> PromptLayout:
    n = rng.randint(0, 6) if n_examples is None else n_examples
    seg = lambda lo, hi: tuple(rng.randrange(1, vocab) for _ in range(rng.randint(lo, hi)))  # noqa: E731
    return PromptLayout(seg(1, 12), tuple(seg(0, 15) for _ in range(n)), seg(0, 10))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
