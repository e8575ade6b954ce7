"""Reproducible random streams for simulations.

Every draw is sourced from a counter-based Philox generator keyed by
``(master seed, role, replication, particle)``, so draws never depend on
scheduling order or worker count.  Brownian increments are pre-generated at
the finest dyadic resolution; coarser resolutions are exact block sums of the
fine increments, which is what makes noise-shared grid-refinement studies
consistent by construction.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["StorageCapError", "stream", "init_stream", "child_seed", "BrownianPathStore"]

# Role tags keep the streams of independent subsystems disjoint.
ROLE_SYSTEM = 0      # a standalone particle-system run
ROLE_REFERENCE = 1   # the large-ensemble reference run
ROLE_COUPLED = 2     # coupled interacting/reference pair
ROLE_REFINE = 3      # step-size refinement studies

_INIT_CHANNEL = 0xFFFF_FFFF  # reserved particle slot for initial-condition draws


class StorageCapError(RuntimeError):
    """A pre-generated array would exceed the configured memory cap."""


def stream(seed: int, role: int, replication: int, particle: int) -> np.random.Generator:
    """Philox generator for one particle's Brownian increments."""
    ss = np.random.SeedSequence(seed, spawn_key=(role, replication, particle))
    return np.random.Generator(np.random.Philox(ss))


def init_stream(seed: int, role: int, replication: int) -> np.random.Generator:
    """Generator for the i.i.d. initial-position draws of one run."""
    return stream(seed, role, replication, _INIT_CHANNEL)


def child_seed(seed: int, role: int, replication: int) -> int:
    """Stable per-run child seed recorded in manifests."""
    ss = np.random.SeedSequence(seed, spawn_key=(role, replication))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class BrownianPathStore:
    """Brownian increments for ``n_steps`` coarse steps of size ``eps``.

    ``levels = K`` stores increments at the fine step ``eps / 2**K``;
    ``increments(level)`` returns the path at step ``eps / 2**level`` where
    every entry is the exact sum of its ``2**(K-level)`` fine entries.
    """

    def __init__(self, seed: int, role: int, replication: int,
                 n_particles: int, n_steps: int, dim: int, eps: float,
                 levels: int = 0, memory_cap_bytes: int = 2 << 30):
        if levels < 0:
            raise ValueError("levels must be >= 0")
        self.levels = int(levels)
        self.n_steps = int(n_steps)
        self.eps = float(eps)
        n_fine = self.n_steps << self.levels
        need = n_fine * n_particles * dim * 8
        if need > memory_cap_bytes:
            raise StorageCapError(
                f"increment store needs {need / 2**20:.0f} MiB "
                f"(> cap {memory_cap_bytes / 2**20:.0f} MiB); "
                f"lower the refinement level or raise the cap to {need} bytes")
        scale = math.sqrt(self.eps / (1 << self.levels))
        fine = np.empty((n_fine, n_particles, dim))
        for i in range(n_particles):
            g = stream(seed, role, replication, i)
            fine[:, i, :] = scale * g.standard_normal((n_fine, dim))
        self.fine = fine

    def increments(self, level: int = 0) -> np.ndarray:
        """Increments at step size eps / 2**level (level == levels is the raw fine path)."""
        if not 0 <= level <= self.levels:
            raise ValueError(f"level must be in [0, {self.levels}], got {level}")
        group = 1 << (self.levels - level)
        if group == 1:
            return self.fine
        n = self.n_steps << level
        return self.fine.reshape(n, group, *self.fine.shape[1:]).sum(axis=1)
