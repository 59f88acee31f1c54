from pathlib import Path

import pytest

from gatelab import parse_asm

PROGRAMS = Path(__file__).resolve().parent.parent / "programs"


def load(name):
    return parse_asm((PROGRAMS / name).read_text())


@pytest.fixture
def programs_dir():
    return PROGRAMS


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
