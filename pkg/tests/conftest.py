import numpy as np
import pytest

from pseudoq.embedstub import TokenEmbeddingMatrix


def matrix(rows, doc_id="d", has_cls=False, dtype=np.float64):
    """Token matrix from literal rows; no [CLS] row unless asked."""
    return TokenEmbeddingMatrix(doc_id, np.asarray(rows, dtype=dtype), has_cls)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def square_rows():
    # two well separated pairs used by several hand examples
    return np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])


# one (number, title, passed, detail) entry per acceptance criterion
ACCEPTANCE = []


def record(number, title, passed, detail):
    ACCEPTANCE.append((number, title, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
