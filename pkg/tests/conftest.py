import sys
import time

import numpy as np
import pytest

from hfvrom.mesh import build_cube_primal, build_dual


@pytest.fixture(scope="session")
def dual1():
    return build_dual(build_cube_primal(1))


@pytest.fixture(scope="session")
def dual2():
    return build_dual(build_cube_primal(2))


@pytest.fixture(scope="session")
def dual3():
    return build_dual(build_cube_primal(3))


@pytest.fixture(scope="session")
def dual4():
    return build_dual(build_cube_primal(4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tets(rng, count, min_volume=1e-3):
    """Random well-shaped tetrahedra as ``(count, 4, 3)`` vertex arrays."""
    out = []
    while len(out) < count:
        x = rng.uniform(-1.0, 1.0, (4, 3))
        if abs(np.linalg.det(x[1:] - x[0])) / 6.0 > min_volume:
            out.append(x)
    return np.array(out)


@pytest.fixture(scope="session")
def manufactured4_run():
    """Manufactured case on n=4 over its full horizon:
    (case, dual, snapshots, per-step divergence, seconds)."""
    from hfvrom.cases import ManufacturedCase
    from hfvrom.fom import run_fom
    case = ManufacturedCase()
    dual = build_dual(build_cube_primal(4))
    start = time.perf_counter()
    snaps, div = run_fom(case, dual, case.controls)
    return case, dual, snaps, div, time.perf_counter() - start


@pytest.fixture(scope="session")
def manufactured4(manufactured4_run):
    return manufactured4_run[:3]


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
