import pytest
import torch

from arit.imagecore import generate_lumen_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def lumen_small():
    """Eight 64x64 frames from the procedural lumen generator."""
    return generate_lumen_dataset(seed=0, n_frames=8, resolution=64)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_line():
    """Record one PASS/FAIL line; all lines are echoed in the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
