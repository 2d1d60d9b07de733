from pathlib import Path

import pytest

SCENES = Path(__file__).resolve().parent.parent / "scenes"


@pytest.fixture(scope="session")
def scene_dir():
    return SCENES


def pytest_configure(config):
    config._acceptance = []


@pytest.fixture(scope="session")
def acceptance(request):
    """Callable recording one criterion outcome: record(cid, passed, detail)."""
    log = request.config._acceptance

    def record(cid, passed, detail):
        log.append((cid, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = getattr(config, "_acceptance", [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for cid, passed, detail in log:
        terminalreporter.write_line(f"criterion {cid:<10} {'PASS' if passed else 'FAIL'}  {detail}")
