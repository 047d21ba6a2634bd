import sys
from pathlib import Path

import pytest

from recfa.model import load_model

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_model(name: str):
    return load_model((FIXTURES / f"{name}.model").read_text())


@pytest.fixture
def skip_call():
    return fixture_model("skip_call")


@pytest.fixture
def loop_two_paths():
    return fixture_model("loop_two_paths")


@pytest.fixture
def rec_foldable():
    return fixture_model("rec_foldable")


@pytest.fixture
def rec_unfoldable():
    return fixture_model("rec_unfoldable")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
