import numpy as np
import pytest

from geli.traj import Dataset, Step, Trajectory


def make_traj(ret, T=4, D=3, labels=None, rng=None, scale=1.0):
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = labels if labels is not None else [None] * T
    steps = tuple(Step(scale * rng.normal(size=D), scale * rng.normal(size=D), labels[t]) for t in range(T))
    return Trajectory(steps, float(ret))


def make_dataset(n=6, T=4, D=3, seed=0, labeled=True):
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n):
        labels = [int(x) for x in rng.integers(0, 2, T)] if labeled else None
        if labeled:
            labels[0], labels[-1] = 1, 0
        trajs.append(make_traj(rng.normal(), T, D, labels, rng))
    return Dataset(tuple(trajs))


@pytest.fixture
def small_dataset():
    return make_dataset()


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def record_acceptance(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
