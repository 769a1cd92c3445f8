import shutil
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def desk(tmp_path) -> Path:
    """A scratch copy of the bundled fixtures; CLI runs write under ``work/``."""
    dst = tmp_path / "desk"
    shutil.copytree(FIXTURES, dst, ignore=shutil.ignore_patterns("work", "__pycache__", "*.py"))
    return dst


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
