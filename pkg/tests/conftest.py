from __future__ import annotations

import pytest

from memfail.ingest import CEEvent, DimmSpec, ErrorBitmap, MemoryAddress
from memfail.synthgen import GeneratorConfig, generate

SPEC4 = DimmSpec("D1", "A", 32, "x4", 2933, "other", 900)
SPEC8 = DimmSpec("D8", "B", 64, "x8", 3200, "p20nm", 100)


def ce(ts, cells=((0, 0),), w=4, dimm="D1", addr=(0, 0, 0, 0, 0, 0, 0, 0, 0)):
    bm = None if cells is None else ErrorBitmap.from_cells(w, cells)
    return CEEvent(ts, dimm, None if addr is None else MemoryAddress(*addr), bm)


@pytest.fixture(scope="session")
def small_fleet():
    return generate(GeneratorConfig(n_dimms=200, duration_days=90, seed=3))


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
