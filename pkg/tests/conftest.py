import os
from pathlib import Path

import numpy as np
import pytest

from egoplan.reachability import make_error_system


@pytest.fixture(scope="session")
def suite_cache(tmp_path_factory) -> Path:
    """Map/field cache shared by the end-to-end tests; EGOPLAN_SUITE_CACHE reuses one across runs."""
    env = os.environ.get("EGOPLAN_SUITE_CACHE")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp("suite_cache")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def error_sys():
    return make_error_system(4.0, 4.0)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``; the line is printed in the summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
