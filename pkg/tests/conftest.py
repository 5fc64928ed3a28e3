import tempfile
import time
from pathlib import Path

import pytest

from mpqlab.checkpoint import save
from mpqlab.model import train_toy

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

_TRAINED: dict[int, tuple] = {}
TRAIN_CPU_SECONDS: dict[int, float] = {}
_CHECKPOINTS: dict[int, str] = {}
_SCRATCH = Path(tempfile.mkdtemp(prefix="mpqlab-tests-"))


def trained(seed: int):
    """Default toy model and splits for ``seed``, trained once per session."""
    if seed not in _TRAINED:
        start = time.process_time()
        _TRAINED[seed] = train_toy(seed)
        TRAIN_CPU_SECONDS[seed] = time.process_time() - start
    return _TRAINED[seed]


def checkpoint(seed: int) -> str:
    """Path of an MPQ1 file holding ``trained(seed)``'s weights."""
    if seed not in _CHECKPOINTS:
        path = _SCRATCH / f"toy-{seed}.mpq"
        save(path, trained(seed)[0])
        _CHECKPOINTS[seed] = str(path)
    return _CHECKPOINTS[seed]


@pytest.fixture(scope="session")
def toy():
    return trained(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
