import numpy as np
import pytest

from overload_sim.workload import (
    RequestClass,
    RequestType,
    SessionModel,
    default_model,
)


@pytest.fixture(scope="session")
def chain():
    return default_model()


def make_chain(rows: dict, classes: dict, start: str, mean=0.2, target=None) -> SessionModel:
    """Build a SessionModel from {src: {dst: prob}} with 'Exit' as the sink."""
    labels = list(classes)
    idx = {lab: i for i, lab in enumerate(labels)}
    n = len(labels)
    p = np.zeros((n + 1, n + 1))
    p[n, n] = 1.0
    for src, dsts in rows.items():
        for dst, v in dsts.items():
            p[idx[src], n if dst == "Exit" else idx[dst]] = v
    types = tuple(RequestType(i, lab, RequestClass(classes[lab]), mean) for i, lab in enumerate(labels))
    return SessionModel(types, p, idx[start], target=None if target is None else idx[target])


# acceptance verdicts, echoed in the terminal summary
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
