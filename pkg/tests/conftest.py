from __future__ import annotations

import pytest

from dualcycle.data import build_corpus
from dualcycle.synth import generate_rows


@pytest.fixture(scope="session")
def small_corpus():
    """A few hundred synthetic pairs, shared read-only across tests."""
    return build_corpus(generate_rows(120, (1, 3), seed=7), generate_rows(20, (2, 3), seed=8))


@pytest.fixture()
def fresh_corpus():
    return build_corpus(generate_rows(60, (1, 3), seed=11), generate_rows(10, (2, 3), seed=12))
