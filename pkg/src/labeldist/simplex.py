"""Grids on the probability simplex and the attack's error metrics.

Every grid point is built from an integer composition ``k`` of ``n = 1/step``
and divided once, so coordinates sum to one without float accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Iterator

import numpy as np

from .errors import ConfigError

SCHEMES = ("uniform_grid", "edges", "region")


def grid_resolution(step: float) -> int:
    """``1/step`` as an int; raises when it is not integral."""
    if not 0 < step <= 1:
        raise ConfigError(f"step must lie in (0, 1], got {step}")
    n = round(1.0 / step)
    if abs(n * step - 1.0) > 1e-9:
        raise ConfigError(f"1/step must be an integer, got step={step}")
    return n


def compositions(n: int, parts: int) -> Iterator[tuple[int, ...]]:
    """Nonnegative integer tuples of length ``parts`` summing to ``n``, in lexicographic order."""
    if parts == 1:
        yield (n,)
        return
    for first in range(n + 1):
        for rest in compositions(n - first, parts - 1):
            yield (first, *rest)


def grid_counts(n_classes: int, step: float) -> np.ndarray:
    if n_classes < 2:
        raise ConfigError("need at least two classes")
    return np.array(list(compositions(grid_resolution(step), n_classes)), dtype=np.int64)


def grid_size(n_classes: int, step: float) -> int:
    return comb(grid_resolution(step) + n_classes - 1, n_classes - 1)


def sample_uniform_grid(n_classes: int, step: float) -> np.ndarray:
    """All grid points of spacing ``step``, shape ``(K, C)``."""
    return grid_counts(n_classes, step) / grid_resolution(step)


def sample_edges(n_classes: int, step: float) -> np.ndarray:
    """Grid points on one-dimensional faces (at least C-2 zero coordinates)."""
    k = grid_counts(n_classes, step)
    keep = (k == 0).sum(axis=1) >= n_classes - 2
    return k[keep] / grid_resolution(step)


def sample_region(n_classes: int, step: float, tau: float) -> np.ndarray:
    """Grid points whose every coordinate is at least ``tau``."""
    if not 0 <= tau < 1.0 / n_classes:
        raise ConfigError(f"tau must lie in [0, 1/C), got {tau}")
    n = grid_resolution(step)
    k = grid_counts(n_classes, step)
    keep = np.all(k >= tau * n - 1e-9, axis=1)
    if not keep.any():
        raise ConfigError(f"no grid point of step {step} has all coordinates >= {tau}")
    return k[keep] / n


@dataclass(frozen=True)
class SamplingScheme:
    kind: str = "uniform_grid"
    step: float = 0.01
    tau: float = 0.2

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ConfigError(f"unknown sampling scheme {self.kind!r}")
        grid_resolution(self.step)

    def points(self, n_classes: int) -> np.ndarray:
        if self.kind == "uniform_grid":
            return sample_uniform_grid(n_classes, self.step)
        if self.kind == "edges":
            return sample_edges(n_classes, self.step)
        return sample_region(n_classes, self.step, self.tau)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "step": self.step, "tau": self.tau}


def on_grid(p: np.ndarray, step: float) -> np.ndarray:
    """Mask of rows of ``p`` that are points of the grid with spacing ``step``."""
    scaled = np.atleast_2d(p) * grid_resolution(step)
    return np.all(np.abs(scaled - np.round(scaled)) < 1e-9, axis=1)


def is_distribution(p, atol: float = 1e-9) -> bool:
    p = np.asarray(p, dtype=float)
    return bool(p.ndim == 1 and np.all(p >= 0) and abs(p.sum() - 1.0) <= atol)


def kl_divergence(p, q) -> float | np.ndarray:
    """``sum_c p_c ln(p_c / q_c)`` in nats, with ``0 ln(0/x) = 0``.

    Returns ``inf`` when ``q`` has an exact zero where ``p`` is positive.
    Row-wise for 2-D inputs.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    pos = p > 0
    with np.errstate(divide="ignore"):
        terms = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(np.where(pos, q, 1.0))), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def mse(p, q) -> float | np.ndarray:
    """Squared Euclidean distance, row-wise for 2-D inputs."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    out = np.sum((p - q) ** 2, axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p) -> float | np.ndarray:
    return kl_divergence(p, np.ones_like(np.asarray(p, dtype=float))) * -1.0
