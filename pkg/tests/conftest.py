import os
from pathlib import Path

import numpy as np
import pytest

from prhartree.scalar_ground import load_or_solve
from prhartree.spectral import Grid


@pytest.fixture(scope="session")
def cache_dir(request) -> Path:
    """Ground-state cache shared by the test session (override with PRHARTREE_CACHE)."""
    env = os.environ.get("PRHARTREE_CACHE")
    if env:
        path = Path(env)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return Path(request.config.cache.mkdir("prhartree"))


@pytest.fixture(scope="session")
def ground32(cache_dir):
    return load_or_solve(Grid(32, 16.0), cache_dir)


@pytest.fixture(scope="session")
def ground128(cache_dir):
    return load_or_solve(Grid(128, 40.0), cache_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def gaussian(grid: Grid, a: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    x, y, z = grid.coords
    cx, cy, cz = center
    return np.exp(-a * ((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2))


# criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion():
    def record(k: int, checks: dict) -> bool:
        ok = all(v for v, _ in checks.values())
        detail = "; ".join(f"{name} {text}{'' if v else ' FAIL'}" for name, (v, text) in checks.items())
        ACCEPTANCE[k] = (ok, detail)
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in range(1, 10):
        if k in ACCEPTANCE:
            ok, detail = ACCEPTANCE[k]
            terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {k}: NOT RUN")
