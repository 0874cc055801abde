import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("pkg", max_examples=60, deadline=None)
settings.load_profile("pkg")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def report():
    """Record and print one acceptance verdict line."""

    def _report(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _VERDICTS[number] = line
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
