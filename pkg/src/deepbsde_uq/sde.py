"""Brownian increments and Euler-Maruyama paths on a uniform grid.

Stream order: increments for a batch are drawn as one ``standard_normal``
call of shape ``(m, N, d)`` in C order from ``numpy.random.default_rng(seed)``
(PCG64 with ziggurat normals), then scaled by ``sqrt(dt)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigurationError, SimulationDivergedError

if TYPE_CHECKING:
    from .problems import BsdeProblem

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(base_seed: int, index: int) -> int:
    """Seed for work item ``index``; distinct indices give unrelated streams."""
    return splitmix64(splitmix64(int(base_seed) & _MASK64) ^ (int(index) & _MASK64))


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigurationError(f"terminal time must be positive, got {self.T}")
        if self.N < 1:
            raise ConfigurationError(f"number of steps must be positive, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt


@dataclass(frozen=True)
class BrownianBatch:
    increments: np.ndarray  # (m, N, d)
    seed: int | None = None

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.increments.shape


def sample_brownian(grid: TimeGrid, m: int, d: int, seed: int) -> BrownianBatch:
    if m < 1 or d < 1:
        raise ConfigurationError("sample count and dimension must be positive")
    rng = np.random.default_rng(seed)
    dw = rng.standard_normal((m, grid.N, d))
    dw *= np.sqrt(grid.dt)
    return BrownianBatch(dw, seed)


def euler_maruyama_forward(
    problem: "BsdeProblem",
    x0,
    grid: TimeGrid,
    batch: BrownianBatch,
) -> np.ndarray:
    """Paths ``X`` of shape ``(m, N + 1, d)`` with ``X[:, 0] = x0``."""
    dw = batch.increments
    m, n_steps, d = dw.shape
    if n_steps != grid.N or d != problem.d:
        raise ConfigurationError(
            f"increments of shape {dw.shape} do not match grid N={grid.N}, d={problem.d}"
        )
    x = np.empty((m, n_steps + 1, d))
    x[:, 0] = np.broadcast_to(np.asarray(x0, dtype=np.float64), (d,))
    dt = grid.dt
    for n in range(n_steps):
        t = n * dt
        xn = x[:, n]
        diff = problem.b(t, xn)
        x[:, n + 1] = xn + problem.a(t, xn) * dt + (diff @ dw[:, n, :, None])[..., 0]
        bad = ~np.isfinite(x[:, n + 1])
        if bad.any():
            raise SimulationDivergedError(int(np.argwhere(bad)[0, 0]), n + 1)
    return x
