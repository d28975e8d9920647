from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from racesim.scenario import load_scenario
from racesim.sim import run_scenario
from racesim.track import build_track

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
SHIPPED = sorted(p.stem for p in SCENARIOS.glob("*.json"))

_criteria: dict[int, tuple[bool, str]] = {}


class ScenarioRuns:
    """Runs each shipped scenario at most once per session."""

    def __init__(self):
        self._cache = {}

    def get(self, name: str, timing: bool = False):
        key = (name, timing)
        if key not in self._cache:
            sc = load_scenario(SCENARIOS / f"{name}.json")
            self._cache[key] = (sc, run_scenario(sc, timing=timing))
        return self._cache[key]


@pytest.fixture(scope="session")
def runs() -> ScenarioRuns:
    return ScenarioRuns()


@pytest.fixture
def criterion():
    """Record a numbered acceptance result, then assert it."""

    def record(number: int, ok: bool, detail: str):
        _criteria[number] = (bool(ok), detail)
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_criteria):
        ok, detail = _criteria[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def straight():
    x = np.arange(0.0, 1000.0 + 1e-9, 5.0)
    return build_track(np.column_stack([x, np.zeros_like(x)]), (7.0, 7.0), closed=False)


@pytest.fixture(scope="session")
def circle():
    a = np.deg2rad(np.arange(0.0, 360.0, 1.0))
    return build_track(np.column_stack([100 * np.cos(a), 100 * np.sin(a)]), (7.0, 7.0))


@pytest.fixture(scope="session")
def oval():
    from racesim.track import load_track
    return load_track(ROOT / "tracks" / "ims_oval.json")
