import copy
from pathlib import Path

import pytest

from sentinel.scenario import parse_scenario

SCENARIO_DIR = Path(__file__).resolve().parents[1] / "src" / "sentinel" / "data" / "scenarios"

BASE = {
    "name": "unit",
    "seed": 1,
    "duration": 30,
    "masters": [
        {"id": 0, "name": "psm", "role": "psm"},
        {"id": 1, "name": "apu", "role": "apu"},
        {"id": 2, "name": "rpu", "role": "rpu"},
    ],
    "slaves": [
        {"id": 0, "name": "door_locks", "base": 0x40000000, "size": 0x1000},
        {"id": 1, "name": "infotainment", "base": 0x40010000, "size": 0x1000},
        {"id": 2, "name": "plain", "base": 0x50000000, "size": 0x100},
    ],
    "spe": [{"slave": "door_locks"}, {"slave": "infotainment"}],
    "policies": [
        {"slave": "door_locks", "master": 2, "offset_start": 0, "offset_end": 0x40,
         "perm": "RW", "prot": 0b000},
        {"slave": "infotainment", "master": 1, "offset_start": 0, "offset_end": 0x400,
         "perm": "RW", "prot": 0b010},
    ],
    "sck": [{"slave": "door_locks", "timer_reload": 5}, {"slave": "infotainment"}],
}


def scenario(**overrides):
    """The unit-test world, with top-level keys replaced by ``overrides``."""
    doc = copy.deepcopy(BASE)
    doc.update(overrides)
    return parse_scenario(doc, "unit")


@pytest.fixture
def base_scenario():
    return scenario()


# one "criterion N: PASS/FAIL ..." line per acceptance criterion, shown at the end
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
