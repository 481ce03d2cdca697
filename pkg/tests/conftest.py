from __future__ import annotations

import pytest

from persim.corpus import build_index
from persim.synthetic import demo_personas, pipeline_backend, showcase_personas, synthetic_corpus

# Filled by test_acceptance; printed once at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus():
    return synthetic_corpus()


@pytest.fixture(scope="session")
def index(corpus):
    return build_index(corpus)


@pytest.fixture
def scripted():
    return pipeline_backend()


@pytest.fixture
def persona_a():
    return showcase_personas()[0]


@pytest.fixture
def persona_b():
    return showcase_personas()[1]


@pytest.fixture
def demo():
    return demo_personas(4)
