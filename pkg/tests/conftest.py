import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hmtier.simengine.machine import reference_hw  # noqa: E402
from hmtier.simengine.training import bucket_workloads  # noqa: E402
from hmtier.trace import SynthParams, generate_synthetic  # noqa: E402

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; the summary prints them in order after the run."""
    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE[number] = (title, bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {title}: {detail}")


@pytest.fixture(scope="session")
def default_trace():
    return generate_synthetic(SynthParams(), 0, 2)


@pytest.fixture(scope="session")
def default_workloads(default_trace):
    return bucket_workloads(default_trace)


@pytest.fixture(scope="session")
def default_wl(default_workloads):
    return default_workloads[0]


@pytest.fixture(scope="session")
def default_peak(default_wl):
    return default_wl.report.peak_memory_bytes


@pytest.fixture(scope="session")
def machine20(default_peak):
    return reference_hw(int(0.2 * default_peak))
