import json
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def frozen():
    with open(HERE / "data" / "frozen_oracles.json") as fh:
        return json.load(fh)


def as_float(value):
    if isinstance(value, list):
        return np.array([as_float(v) for v in value], dtype=float)
    return float(Fraction(value))


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)``; the summary prints one line each."""
    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
