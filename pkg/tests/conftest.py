from __future__ import annotations

import time

import pytest

from actsvd.models import make_dataset, make_toy_model
from actsvd.ranks import CompressionTarget, TrainHyper, train_ranks

TARGETS = (0.4, 0.6, 0.8)


@pytest.fixture(scope="session")
def char_model():
    return make_toy_model("char_lm", 0)


@pytest.fixture(scope="session")
def char_train():
    return make_dataset("char_lm", 0, 64, "train")


@pytest.fixture(scope="session")
def char_test():
    return make_dataset("char_lm", 0, 64, "test")


@pytest.fixture(scope="session")
def reg_model():
    return make_toy_model("teacher_student_regression", 0)


@pytest.fixture(scope="session")
def reg_train():
    return make_dataset("teacher_student_regression", 0, 64, "train")


@pytest.fixture(scope="session")
def reg_test():
    return make_dataset("teacher_student_regression", 0, 64, "test")


@pytest.fixture(scope="session")
def char_training(char_model, char_train):
    """Default-hyperparameter training runs on the seeded char_lm, keyed by target; values are (result, seconds)."""
    runs = {}
    for target in TARGETS:
        start = time.perf_counter()
        result = train_ranks(char_model, char_train, CompressionTarget(target), TrainHyper())
        runs[target] = (result, time.perf_counter() - start)
    return runs


# -- acceptance verdict lines ----------------------------------------------------------

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Call with (number, title, check) where check() returns (ok, detail); records one PASS/FAIL line."""

    def emit(number: int, title: str, check) -> None:
        try:
            ok, detail = check()
        except Exception as exc:  # a crash is a failed criterion, reported like any other
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        line = f"{'PASS' if ok else 'FAIL'} C{number:<2d} {title}: {detail}"
        _VERDICTS[number] = line
        print(line)
        assert ok, line

    return emit


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
