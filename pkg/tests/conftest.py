from __future__ import annotations

import numpy as np
import pytest

from labeldist.data import LabeledDataset, split_aux, synth_gaussians
from labeldist.nn import ArchSpec


def rel_err(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numeric_grad(f, arrays, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of a scalar ``f()`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            keep = arr[i]
            arr[i] = keep + h
            up = f()
            arr[i] = keep - h
            down = f()
            arr[i] = keep
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


@pytest.fixture(scope="session")
def gauss_pool() -> LabeledDataset:
    return synth_gaussians([[2.0, 2.0], [-2.0, -2.0]], None, [600, 600], seed=11)


@pytest.fixture(scope="session")
def aux_and_pool(gauss_pool):
    return split_aux(gauss_pool, 50, seed=12)


@pytest.fixture(scope="session")
def small_arch() -> ArchSpec:
    return ArchSpec(2, (4, 3, 2), "relu", "sigmoid")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
