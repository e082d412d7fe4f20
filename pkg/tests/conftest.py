import os
from pathlib import Path

import pytest

from mdsaw.materials import bundled_material_path, isotropic_material, load_material

ACCEPTANCE_LINES = []

QUARTZ_5K_ENV = "MDSAW_QUARTZ_5K"


def record(criterion, label, ok, detail=""):
    """Collect one acceptance line; printed in the terminal summary."""
    status = "PASS" if ok else "FAIL"
    if ok is None:
        status = "SKIP"
    ACCEPTANCE_LINES.append(f"[criterion {criterion}] {status}  {label}  {detail}".rstrip())
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def quartz():
    return load_material(bundled_material_path())


@pytest.fixture(scope="session")
def quartz_5k():
    path = os.environ.get(QUARTZ_5K_ENV)
    if not path or not Path(path).exists():
        return None
    return load_material(path)


@pytest.fixture(scope="session")
def iso():
    return isotropic_material()
