import numpy as np
import pytest
import torch

from mvsds import scenegen as sg
from mvsds import sched as sch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def linear_sched():
    return sch.build_schedule(1000, "linear_beta")


@pytest.fixture(scope="session")
def cosine_sched():
    return sch.build_schedule(1000, "cosine")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "tiny"
    sg.build_dataset(np.random.default_rng(3), 4, root)
    return sg.Dataset(root)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Records one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
