from __future__ import annotations

from pathlib import Path

import pytest

from pidjudge.model import Dataset
from pidjudge.synthetic import make_dataset

_ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one acceptance line; the terminal summary prints them in order."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append((number, bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_ACCEPTANCE, key=lambda t: t[0]):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}")


@pytest.fixture(scope="session")
def synth10(tmp_path_factory) -> Dataset:
    """Ten rendered synthetic diagrams with 50 symbols each at the default sheet size."""
    out = tmp_path_factory.mktemp("synth10")
    return make_dataset(10, seed=0, out_dir=out, n_symbols=50)


@pytest.fixture(scope="session")
def synth3(tmp_path_factory) -> Dataset:
    out = tmp_path_factory.mktemp("synth3")
    return make_dataset(3, seed=1, out_dir=out, n_symbols=40, width=2000, height=1500)


@pytest.fixture
def tmp_cwd(tmp_path, monkeypatch) -> Path:
    monkeypatch.chdir(tmp_path)
    return tmp_path
