import numpy as np
import pytest

from hdsched.channels import MarkovChannel, StaticChannel
from hdsched.plant import PlantModel

A_FARM = [[1.1, 0.2], [0.2, 0.8]]
I2 = np.eye(2)
MEMORYLESS = [[0.5, 0.5], [0.5, 0.5]]
STICKY = [[0.8, 0.2], [0.2, 0.8]]


def one_step_plant():
    return PlantModel(A_FARM, -I2, A_FARM, I2, I2, v=1)


def two_step_plant():
    return PlantModel(A_FARM, [[-1.0], [-1.0]], [[2.9, -1.0]], I2, I2, v=2)


def damped_plant(v=2):
    return PlantModel(A_FARM, [[-1.0], [-1.0]], [[0.7, 0.4]], I2, I2, v=v)


def three_step_plant():
    # K = N - A with N nilpotent of index 3 and B = I
    A = np.array([[1.1, 0.2, 0.0], [0.2, 0.8, 0.1], [0.0, 0.1, 0.9]])
    N = np.array([[0.0, 0.5, 0.0], [0.0, 0.0, 0.5], [0.0, 0.0, 0.0]])
    return PlantModel(A, np.eye(3), N - A, np.eye(3), np.diag([1.0, 0.5, 0.8]), v=3)


def fading(D):
    return MarkovChannel([0.1, 0.4], [0.1, 0.4], D, D)


@pytest.fixture
def plant1():
    return one_step_plant()


@pytest.fixture
def plant2():
    return two_step_plant()


@pytest.fixture
def plant3():
    return three_step_plant()


@pytest.fixture
def static01():
    return StaticChannel(0.1, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_history(rng, v, max_eta=4, max_tau=4):
    """Consistent ``(etas, taus)`` history for a v-step loop."""
    while True:
        etas = [int(e) for e in rng.integers(1, max_eta + 1, size=v)]
        taus = [0] * v
        taus[v - 1] = int(rng.integers(1, max_tau + 1))
        for j in range(v - 1, 0, -1):
            # either a fresh sensing inside the gap or the same one as before
            if etas[j] >= 2 and rng.random() < 0.6:
                taus[j - 1] = int(rng.integers(1, etas[j]))
            else:
                taus[j - 1] = etas[j] + taus[j]
        if all(t <= 12 for t in taus):
            return etas, taus


CRITERIA = {}


def record_criterion(number, title, checks, elapsed, limit):
    """Store and print one PASS/FAIL line; ``checks`` maps a label to ``(ok, detail)``."""
    checks = dict(checks)
    checks[f"runtime < {limit:g}s"] = (elapsed < limit, f"{elapsed:.1f}s")
    ok = all(c[0] for c in checks.values())
    parts = "; ".join(f"{k}: {'ok' if c[0] else 'FAIL'} ({c[1]})" for k, c in checks.items())
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title} | {parts}"
    CRITERIA[number] = line
    print(line)
    return ok, line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
