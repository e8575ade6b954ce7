"""Explicit Euler integration of the interacting particle system.

One step of the scheme moves every particle by its Brownian increment plus
``eps`` times the drift ``chi grad h - grad V`` evaluated at the current
positions, then advances the field using the current positions as the source
on the elapsed interval (the piecewise-constant, left-endpoint convention).

Besides plain runs, the module provides the machinery for the verification
experiments: recording a large-ensemble reference field, replaying it as an
exogenous drift for coupled propagation-of-chaos runs, and noise-shared step
refinement for convergence-rate studies.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from . import rngstream
from .field import EscapeError, FieldGrid, HistoryBuffer, deposit_density, evaluate_h_direct
from .model import ConfigurationError, ModelInstance
from .rngstream import BrownianPathStore, StorageCapError

__all__ = [
    "BlowUpError",
    "EulerConfig",
    "GridGeometry",
    "RunRecord",
    "CoupledRunConfig",
    "CoupledRecord",
    "RefinementRecord",
    "ReferenceField",
    "auto_grid",
    "epsilon_threshold",
    "euler_step",
    "run_particle_system",
    "simulate_nonlinear_reference",
    "run_coupled_pair",
    "run_coupled_poc",
    "refine_reference",
]

_TARGET_SPACING = 0.05
_SAFE_HALF_WIDTH = 8.0  # particle excursion allowance inside the safe region


class BlowUpError(RuntimeError):
    """Non-finite particle coordinate.

    The regularized model cannot blow up, so this always indicates a numerical
    fault (step size too large for the chosen potential, or a bad custom
    component).
    """

    def __init__(self, step: int, particle: int):
        self.step = step
        self.particle = particle
        super().__init__(f"non-finite coordinate for particle {particle} at step {step}")


@dataclass(frozen=True)
class GridGeometry:
    length: float
    n_points: int
    margin: float


def auto_grid(delta: float, horizon: float,
              length: Optional[float] = None,
              n_points: Optional[int] = None) -> GridGeometry:
    """Size the periodic grid for a run of the given horizon.

    The margin keeps every evaluated Gaussian tail (width up to
    sqrt(delta + T)) at least six standard deviations away from the wrap; the
    default length adds room for particle excursions on top of that.
    """
    margin = 6.0 * math.sqrt(delta + horizon)
    if length is None:
        length = float(math.ceil(margin + _SAFE_HALF_WIDTH))
    if length <= margin:
        raise ConfigurationError(
            f"grid length {length} does not exceed the wrap margin {margin:.2f} "
            f"required for horizon {horizon}")
    if n_points is None:
        n_points = 1 << max(8, math.ceil(math.log2(2.0 * length / _TARGET_SPACING)))
    return GridGeometry(float(length), int(n_points), margin)


@dataclass(frozen=True)
class EulerConfig:
    """Configuration of one particle-system run."""

    epsilon: float
    n_steps: int
    n_particles: int
    seed: int
    field_method: str = "grid"          # "grid" | "direct"
    grid_length: Optional[float] = None
    grid_points: Optional[int] = None
    replication: int = 0
    record_trajectory: bool = False
    snapshot_steps: tuple = ()
    zero_noise: bool = False            # test mode: drift-only dynamics
    truncation_tol: float = 0.0         # history drop tolerance (direct method)
    deposit_method: str = "auto"

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigurationError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.n_steps < 1 or self.n_particles < 1:
            raise ConfigurationError("n_steps and n_particles must be >= 1")
        if self.field_method not in ("grid", "direct"):
            raise ConfigurationError(f"unknown field method {self.field_method!r}")

    @property
    def horizon(self) -> float:
        return self.epsilon * self.n_steps


def epsilon_threshold(model: ModelInstance) -> float:
    """Default stability threshold eps0 = min(0.1, 1/(2 v*)) for v* > 0."""
    v_star = model.constants().v_star
    if v_star <= 0:
        return 0.1
    return min(0.1, 1.0 / (2.0 * v_star))


def _geometry(model: ModelInstance, config: EulerConfig) -> GridGeometry:
    return auto_grid(getattr(model.kernel, "delta", 1.0), config.horizon,
                     config.grid_length, config.grid_points)


# ---------------------------------------------------------------------------
# Field sources: where the drift gradient comes from during a run
# ---------------------------------------------------------------------------


class _GridSource:
    def __init__(self, model: ModelInstance, geom: GridGeometry, eps: float,
                 deposit_method: str):
        self.grid = FieldGrid(model.params, model.kernel, model.h0,
                              geom.length, geom.n_points, geom.margin)
        self.kernel = model.kernel
        self.eps = eps
        self.deposit_method = deposit_method

    def grad_h(self, positions: np.ndarray) -> np.ndarray:
        return self.grid.grad_h_at(positions[:, 0])[:, None]

    def advance(self, positions: np.ndarray) -> None:
        source = deposit_density(positions, self.kernel, self.grid, self.deposit_method)
        self.grid.advance(source, self.eps)


class _DirectSource:
    def __init__(self, model: ModelInstance, eps: float, truncation_tol: float):
        self.model = model
        self.history = HistoryBuffer(step=eps, truncation_tol=truncation_tol)

    def grad_h(self, positions: np.ndarray) -> np.ndarray:
        _, grad = evaluate_h_direct(self.history, self.model.h0, self.model.params,
                                    self.model.kernel, positions)
        return np.atleast_2d(grad)

    def advance(self, positions: np.ndarray) -> None:
        self.history.append(positions)
        self.history.truncate(self.model.params.alpha)


class _ReplaySource:
    """Exogenous drift field replayed from a recorded reference run."""

    def __init__(self, reference: "ReferenceField"):
        self.reference = reference
        self.n = 0

    def grad_h(self, positions: np.ndarray) -> np.ndarray:
        return self.reference.grad_at(self.n, positions[:, 0])[:, None]

    def advance(self, positions: np.ndarray) -> None:
        self.n += 1


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    """Per-run summaries: moment series, monitors, optional trajectory/snapshots."""

    times: np.ndarray
    mean: np.ndarray                 # (n_steps+1, d) per-step particle mean
    m2: np.ndarray                   # (n_steps+1,) mean squared radius
    positions: np.ndarray            # final positions (N, d)
    trajectory: Optional[np.ndarray] = None
    snapshots: dict = field(default_factory=dict)
    max_grad_violation: float = -math.inf
    m2_level: float = math.inf
    m2_overshoot: float = 0.0
    wall_time: float = 0.0


def _make_source(model: ModelInstance, config: EulerConfig,
                 replay: Optional["ReferenceField"] = None):
    if replay is not None:
        return _ReplaySource(replay)
    if config.field_method == "direct" or model.dim != 1:
        return _DirectSource(model, config.epsilon, config.truncation_tol)
    return _GridSource(model, _geometry(model, config), config.epsilon,
                       config.deposit_method)


def _run_engine(model: ModelInstance, config: EulerConfig,
                increments: np.ndarray, init_positions: np.ndarray,
                replay: Optional["ReferenceField"] = None,
                grad_recorder: Optional[list] = None) -> RunRecord:
    start = time.perf_counter()
    params = model.params
    eps = config.epsilon
    n_steps = config.n_steps
    positions = np.array(init_positions, dtype=float)
    if positions.shape != (config.n_particles, model.dim):
        raise ConfigurationError(
            f"initial positions have shape {positions.shape}, expected "
            f"{(config.n_particles, model.dim)}")

    source = _make_source(model, config, replay)
    _, sup_grad_g, _ = model.kernel.sup_norms()
    _, sup_grad_h0, _ = model.h0.sup_norms()
    bound_tail = params.beta * sup_grad_g / params.alpha

    times = eps * np.arange(n_steps + 1)
    mean = np.empty((n_steps + 1, model.dim))
    m2 = np.empty(n_steps + 1)
    trajectory = np.empty((n_steps + 1, config.n_particles, model.dim)) \
        if config.record_trajectory else None
    snapshots: dict = {}
    max_violation = -math.inf

    def record(n: int) -> None:
        mean[n] = positions.mean(axis=0)
        m2[n] = float(np.mean(np.sum(positions * positions, axis=1)))
        if trajectory is not None:
            trajectory[n] = positions
        if n in config.snapshot_steps and isinstance(source, _GridSource):
            g = source.grid
            snapshots[n] = {"x": g.x.copy(), "h": g.h_values.copy(),
                            "theta": g.theta_values.copy(),
                            "grad_h": g.grad_h_values.copy()}

    record(0)
    # Transient overflow right before a blow-up is expected; the finiteness
    # guard below is the failure detector, so keep numpy quiet inside the loop.
    for n in range(n_steps):
        t = n * eps
        with np.errstate(over="ignore", invalid="ignore"):
            grad_h = source.grad_h(positions)
            if grad_recorder is not None:
                grad_recorder.append(source.grid.grad_h_values.copy())
            gnorm = np.linalg.norm(grad_h, axis=1) if model.dim > 1 else np.abs(grad_h[:, 0])
            bound = math.exp(-params.alpha * t) * sup_grad_h0 + bound_tail
            max_violation = max(max_violation, float(gnorm.max() - bound))

            drift = params.chi * grad_h - model.potential.gradient(positions)
            new_positions = positions + increments[n] + eps * drift
        if not np.all(np.isfinite(new_positions)):
            bad = int(np.argmax(~np.isfinite(new_positions).all(axis=1)))
            raise BlowUpError(n + 1, bad)
        source.advance(positions)
        positions = new_positions
        with np.errstate(over="ignore"):
            record(n + 1)
    if grad_recorder is not None:
        grad_recorder.append(source.grid.grad_h_values.copy())

    level = model.m2_level()
    overshoot = max(0.0, float(m2.max() - level)) if math.isfinite(level) else 0.0
    return RunRecord(times=times, mean=mean, m2=m2, positions=positions,
                     trajectory=trajectory, snapshots=snapshots,
                     max_grad_violation=max_violation,
                     m2_level=level, m2_overshoot=overshoot,
                     wall_time=time.perf_counter() - start)


def euler_step(positions: np.ndarray, grid: FieldGrid, model: ModelInstance,
               eps: float, increments: np.ndarray,
               deposit_method: str = "auto") -> np.ndarray:
    """One explicit Euler update against a grid field; the field advances in place."""
    grad_h = grid.grad_h_at(positions[:, 0])[:, None]
    drift = model.params.chi * grad_h - model.potential.gradient(positions)
    new_positions = positions + increments + eps * drift
    if not np.all(np.isfinite(new_positions)):
        bad = int(np.argmax(~np.isfinite(new_positions).all(axis=1)))
        raise BlowUpError(grid.step + 1, bad)
    grid.advance(deposit_density(positions, model.kernel, grid, deposit_method), eps)
    return new_positions


def _increments_for(config: EulerConfig, model: ModelInstance, role: int) -> np.ndarray:
    if config.zero_noise:
        return np.zeros((config.n_steps, config.n_particles, model.dim))
    store = BrownianPathStore(config.seed, role, config.replication,
                              config.n_particles, config.n_steps, model.dim,
                              config.epsilon)
    return store.increments(0)


def _initial_positions(config: EulerConfig, model: ModelInstance, role: int) -> np.ndarray:
    rng = rngstream.init_stream(config.seed, role, config.replication)
    return model.mu0.sample(config.n_particles, rng)


def run_particle_system(model: ModelInstance, config: EulerConfig,
                        role: int = rngstream.ROLE_SYSTEM) -> RunRecord:
    """Simulate the interacting system; deterministic given (config, seed)."""
    increments = _increments_for(config, model, role)
    init = _initial_positions(config, model, role)
    return _run_engine(model, config, increments, init)


# ---------------------------------------------------------------------------
# Recorded reference fields
# ---------------------------------------------------------------------------

_REF_MAGIC = b"KSPPREF1"


class ReferenceField:
    """Per-step gradient grids recorded from a reference run, replayable as drift."""

    def __init__(self, epsilon: float, length: float, n_points: int, margin: float,
                 grads: np.ndarray):
        self.epsilon = float(epsilon)
        self.length = float(length)
        self.n_points = int(n_points)
        self.margin = float(margin)
        self.grads = np.asarray(grads, dtype=float)
        if self.grads.shape[1] != self.n_points:
            raise ConfigurationError("gradient grids do not match the stated grid size")
        self.x = -self.length + (2.0 * self.length / self.n_points) * np.arange(self.n_points)
        self._spline_step = -1
        self._spline: Optional[CubicSpline] = None

    @property
    def n_steps(self) -> int:
        return self.grads.shape[0] - 1

    def grad_at(self, step: int, x: np.ndarray) -> np.ndarray:
        if step >= self.grads.shape[0]:
            raise ConfigurationError(
                f"reference trajectory ends at step {self.n_steps}, requested {step}")
        pts = np.atleast_1d(np.asarray(x, dtype=float))
        bound = self.length - self.margin
        out = np.abs(pts) > bound
        if np.any(out):
            i = int(np.argmax(out))
            raise EscapeError(i, step, float(pts[i]), bound)
        if step != self._spline_step:
            self._spline = CubicSpline(self.x, self.grads[step])
            self._spline_step = step
        return self._spline(pts)

    # Flat binary layout (little endian):
    #   8s   magic "KSPPREF1"
    #   u32  version, dim, n_steps, n_points
    #   f64  epsilon, length, margin
    #   f64[(n_steps+1) * n_points] row-major gradient grids
    def save(self, path) -> None:
        header = struct.pack("<8sIIIIddd",
                             _REF_MAGIC, 1, 1, self.n_steps, self.n_points,
                             self.epsilon, self.length, self.margin)
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(self.grads, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ReferenceField":
        with open(path, "rb") as f:
            header = f.read(struct.calcsize("<8sIIIIddd"))
            magic, version, dim, n_steps, n_points, eps, length, margin = \
                struct.unpack("<8sIIIIddd", header)
            if magic != _REF_MAGIC or version != 1:
                raise ConfigurationError(f"{path} is not a reference-field recording")
            if dim != 1:
                raise ConfigurationError("only d = 1 recordings are supported")
            data = np.frombuffer(f.read((n_steps + 1) * n_points * 8), dtype="<f8")
        return cls(epsilon=eps, length=length, n_points=n_points, margin=margin,
                   grads=data.reshape(n_steps + 1, n_points))


def simulate_nonlinear_reference(model: ModelInstance, config: EulerConfig,
                                 storage_cap_bytes: int = 2 << 30) -> tuple[ReferenceField, RunRecord]:
    """Run a large ensemble and record its per-step gradient grids.

    The recording stands in for the law of the limiting process when coupled
    runs need an exogenous drift; its sampling bias is O(n_particles^{-1/2}).
    """
    if config.field_method != "grid":
        raise ConfigurationError("reference recording requires the grid field method")
    geom = _geometry(model, config)
    need = (config.n_steps + 1) * geom.n_points * 8
    if need > storage_cap_bytes:
        raise StorageCapError(
            f"reference recording needs {need} bytes "
            f"(> cap {storage_cap_bytes}); raise the cap or shorten the run")
    grads: list = []
    increments = _increments_for(config, model, rngstream.ROLE_REFERENCE)
    init = _initial_positions(config, model, rngstream.ROLE_REFERENCE)
    record = _run_engine(model, config, increments, init, grad_recorder=grads)
    ref = ReferenceField(config.epsilon, geom.length, geom.n_points, geom.margin,
                         np.stack(grads))
    return ref, record


# ---------------------------------------------------------------------------
# Coupled propagation-of-chaos runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoupledRunConfig:
    """Interacting system vs reference particles on shared noise and initial data."""

    base: EulerConfig                      # the interacting system (N particles)
    n_ref: int = 0                         # live reference ensemble size
    reference: Optional[ReferenceField] = None
    replications: int = 1

    def __post_init__(self):
        if self.reference is None and self.n_ref < 1:
            raise ConfigurationError("need either a recorded reference or n_ref >= 1")


@dataclass
class CoupledRecord:
    times: np.ndarray
    deviation_sq: np.ndarray          # mean over reps of per-step mean_i |X - Xbar|^2
    deviation_se: np.ndarray
    per_rep: np.ndarray               # (replications, n_steps+1)
    max_grad_violation: float
    m2: np.ndarray                    # interacting-system mean |Y|^2, averaged over reps
    reference_bias_scale: float       # O(1/sqrt(n_ref)) proxy bias indicator


def run_coupled_pair(model: ModelInstance, config: EulerConfig,
                     increments: np.ndarray, init: np.ndarray,
                     reference: ReferenceField) -> tuple[np.ndarray, RunRecord, RunRecord]:
    """One replication: both systems stepped in lockstep on shared noise.

    Returns the per-step deviation series mean_i |X_i - Xbar_i|^2 along with
    both run records.
    """
    if reference.n_steps < config.n_steps:
        raise ConfigurationError(
            f"reference trajectory ({reference.n_steps} steps) is shorter than "
            f"the requested horizon ({config.n_steps} steps)")
    if abs(reference.epsilon - config.epsilon) > 1e-12:
        raise ConfigurationError("reference recording uses a different step size")
    cfg = replace(config, record_trajectory=True)
    own = _run_engine(model, cfg, increments, init)
    ref = _run_engine(model, cfg, increments, init, replay=reference)
    diff = own.trajectory - ref.trajectory
    dev = np.mean(np.sum(diff * diff, axis=-1), axis=1)
    return dev, own, ref


def _coupled_single(model: ModelInstance, cc: CoupledRunConfig, rep: int):
    base = replace(cc.base, replication=rep)
    reference = cc.reference
    if reference is None:
        ref_cfg = replace(base, n_particles=cc.n_ref, record_trajectory=False)
        reference, _ = simulate_nonlinear_reference(model, ref_cfg)
    increments = _increments_for(base, model, rngstream.ROLE_COUPLED)
    init = _initial_positions(base, model, rngstream.ROLE_COUPLED)
    dev, own, ref = run_coupled_pair(model, base, increments, init, reference)
    violation = max(own.max_grad_violation, ref.max_grad_violation)
    return dev, violation, own.m2


def run_coupled_poc(model: ModelInstance, cc: CoupledRunConfig,
                    workers: int = 1) -> CoupledRecord:
    """Deviation of the interacting system from reference particles, across replications."""
    results = _map_indexed(lambda r: _coupled_single(model, cc, r),
                           cc.replications, workers)
    per_rep = np.stack([r[0] for r in results])
    violation = max(r[1] for r in results)
    m2 = np.mean(np.stack([r[2] for r in results]), axis=0)
    dev_mean = per_rep.mean(axis=0)
    dev_se = (per_rep.std(axis=0, ddof=1) / math.sqrt(cc.replications)
              if cc.replications > 1 else np.zeros_like(dev_mean))
    times = cc.base.epsilon * np.arange(cc.base.n_steps + 1)
    n_ref = cc.n_ref if cc.reference is None else 0
    bias = 1.0 / math.sqrt(n_ref) if n_ref else float("nan")
    return CoupledRecord(times, dev_mean, dev_se, per_rep, violation, m2, bias)


def _map_indexed(fn, count: int, workers: int) -> list:
    """Run fn(0..count-1); results ordered by index regardless of worker count."""
    if workers <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


# ---------------------------------------------------------------------------
# Step refinement
# ---------------------------------------------------------------------------


@dataclass
class RefinementRecord:
    times: np.ndarray
    coarse_at_coarse: np.ndarray      # (n_steps+1, N, d)
    fine_at_coarse: np.ndarray        # fine-trajectory states at coarse step times
    deviation_sq: np.ndarray          # per coarse step, mean_i |Y_coarse - Y_fine|^2
    max_grad_violation: float


def refine_reference(model: ModelInstance, config: EulerConfig, levels: int,
                     memory_cap_bytes: int = 2 << 30) -> RefinementRecord:
    """Coarse run vs a 2**levels finer run on the identical Brownian path."""
    store = BrownianPathStore(config.seed, rngstream.ROLE_REFINE, config.replication,
                              config.n_particles, config.n_steps, model.dim,
                              config.epsilon, levels=levels,
                              memory_cap_bytes=memory_cap_bytes)
    if config.zero_noise:
        store.fine[:] = 0.0
    init = _initial_positions(config, model, rngstream.ROLE_REFINE)

    coarse_cfg = replace(config, record_trajectory=True)
    coarse = _run_engine(model, coarse_cfg, store.increments(0), init)

    factor = 1 << levels
    geom = _geometry(model, config)
    fine_cfg = replace(config, record_trajectory=True,
                       epsilon=config.epsilon / factor,
                       n_steps=config.n_steps * factor,
                       grid_length=geom.length, grid_points=geom.n_points)
    fine = _run_engine(model, fine_cfg, store.increments(levels), init)

    fine_at_coarse = fine.trajectory[::factor]
    diff = coarse.trajectory - fine_at_coarse
    dev = np.mean(np.sum(diff * diff, axis=-1), axis=1)
    return RefinementRecord(coarse.times, coarse.trajectory, fine_at_coarse, dev,
                            max(coarse.max_grad_violation, fine.max_grad_violation))
