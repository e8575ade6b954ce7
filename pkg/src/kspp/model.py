"""Problem instances for the regularized chemotaxis particle model.

A problem instance bundles the scalar parameters (decay ``alpha``, production
``beta``, sensitivity ``chi``, dimension ``dim``), the dispersal kernel ``g``
through which particles deposit chemical, the confinement potential ``V``, the
initial chemical field ``h0`` and the initial particle distribution ``mu0``.

This module also derives all theoretical constants used by the long-time
verdicts: the convexity modulus ``v_star`` of the potential, the threshold
``lambda`` it must dominate, the decay rate ``lambda_tilde``, the
characteristic roots ``r1, r2`` and the constant bounding ``N * sup_t E|X - Xbar|^2``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ConfigurationError",
    "ModelParams",
    "GaussianKernel",
    "CustomKernel",
    "QuadraticPotential",
    "CustomPotential",
    "ZeroField",
    "GaussianBumpField",
    "CustomField",
    "PointMassInit",
    "GaussianInit",
    "UniformInit",
    "ModelInstance",
    "TheoreticalConstants",
    "AssumptionReport",
    "ConvexityEstimate",
    "kernel_sup_norms",
    "convexity_modulus",
    "check_assumption_a",
    "compute_constants",
    "field_gradient_bound",
]


class ConfigurationError(ValueError):
    """Invalid or inconsistent problem configuration."""


def _as_points(x, dim: int) -> np.ndarray:
    """Coerce scalars / flat arrays to shape (..., dim)."""
    a = np.asarray(x, dtype=float)
    if a.ndim == 0:
        if dim != 1:
            raise ValueError(f"scalar point given but dim={dim}")
        return a.reshape(1)
    if a.shape[-1] != dim:
        if dim == 1:
            return a[..., np.newaxis]
        raise ValueError(f"point array has last axis {a.shape[-1]}, expected {dim}")
    return a


@dataclass(frozen=True)
class ModelParams:
    """Scalar model parameters.

    ``gamma`` (the time scale of the chemical field) is fixed to 1; any other
    value is rejected because every derived constant assumes it.  ``beta`` and
    ``chi`` may be zero, which switches off chemical production / chemotaxis
    and is used by decoupled test modes.
    """

    alpha: float
    beta: float
    chi: float
    dim: int = 1
    gamma: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 0 or self.chi < 0:
            raise ConfigurationError("beta and chi must be >= 0")
        if self.gamma != 1.0:
            raise ConfigurationError(
                "gamma is fixed to 1 in this toolkit; rescale time units instead of setting gamma"
            )
        if int(self.dim) != self.dim or self.dim < 1:
            raise ConfigurationError(f"dim must be a positive integer, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))


# ---------------------------------------------------------------------------
# Dispersal kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianKernel:
    """Normalized Gaussian dispersal kernel with variance ``delta`` per coordinate."""

    delta: float
    dim: int = 1
    kind: str = field(default="gaussian", init=False, repr=False)

    def __post_init__(self):
        if self.delta <= 0:
            raise ConfigurationError(f"kernel variance delta must be > 0, got {self.delta}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ConfigurationError(f"kernel dim must be a positive integer, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))

    def value(self, x) -> np.ndarray:
        pts = _as_points(x, self.dim)
        r2 = np.sum(pts * pts, axis=-1)
        norm = (2.0 * math.pi * self.delta) ** (-self.dim / 2.0)
        return norm * np.exp(-r2 / (2.0 * self.delta))

    def gradient(self, x) -> np.ndarray:
        pts = _as_points(x, self.dim)
        return -pts / self.delta * self.value(pts)[..., np.newaxis]

    def sup_norms(self) -> tuple[float, float, float]:
        """(sup |g|, sup |grad g|, entrywise sup |d_i d_j g|), closed form."""
        peak = (2.0 * math.pi * self.delta) ** (-self.dim / 2.0)
        sup_grad = peak * math.exp(-0.5) / math.sqrt(self.delta)
        sup_hess = peak / self.delta
        return peak, sup_grad, sup_hess


@dataclass(frozen=True, eq=False)
class CustomKernel:
    """User-supplied C^2_b kernel; sup norms and unit integral must be declared.

    The declared norms feed the theorem checks, so they are verified here by
    sampling (a warning is emitted on violation, nothing is silently
    re-estimated).  The integral is required to be 1; the toolkit never
    rescales ``beta`` on the caller's behalf.
    """

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    sup_g: Optional[float] = None
    sup_grad_g: Optional[float] = None
    sup_hess_g: Optional[float] = None
    dim: int = 1
    check_box: float = 10.0
    kind: str = field(default="custom", init=False, repr=False)

    def sup_norms(self) -> tuple[float, float, float]:
        if None in (self.sup_g, self.sup_grad_g, self.sup_hess_g):
            raise ConfigurationError(
                "custom kernel must declare sup_g, sup_grad_g and sup_hess_g"
            )
        return float(self.sup_g), float(self.sup_grad_g), float(self.sup_hess_g)

    def validate(self, n_samples: int = 4096, seed: int = 0) -> None:
        sup_g, sup_grad, _ = self.sup_norms()
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-self.check_box, self.check_box, size=(n_samples, self.dim))
        vals = np.asarray(self.value(pts), dtype=float)
        grads = np.asarray(self.gradient(pts), dtype=float)
        if np.max(np.abs(vals)) > sup_g * (1 + 1e-9):
            warnings.warn("custom kernel exceeds its declared sup norm", stacklevel=2)
        if np.max(np.linalg.norm(grads, axis=-1)) > sup_grad * (1 + 1e-9):
            warnings.warn("custom kernel gradient exceeds its declared sup norm", stacklevel=2)
        if self.dim == 1:
            xs = np.linspace(-self.check_box, self.check_box, 20001)
            mass = float(np.trapezoid(np.asarray(self.value(xs[:, None])).ravel(), xs))
            if abs(mass - 1.0) > 1e-6:
                raise ConfigurationError(
                    f"custom kernel integrates to {mass:.8f}, not 1; rescale beta yourself "
                    "(automatic rescaling is deliberately not performed)"
                )


def kernel_sup_norms(kernel) -> tuple[float, float, float]:
    """Sup norms (value, gradient, entrywise Hessian) of the dispersal kernel."""
    return kernel.sup_norms()


# ---------------------------------------------------------------------------
# Confinement potentials
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QuadraticPotential:
    """V(x) = <x, A x>/2 with A symmetric positive semi-definite."""

    matrix: np.ndarray
    kind: str = field(default="quadratic", init=False, repr=False)

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if a.shape[0] != a.shape[1]:
            raise ConfigurationError(f"potential matrix must be square, got {a.shape}")
        if not np.allclose(a, a.T, atol=1e-12):
            raise ConfigurationError("potential matrix must be symmetric")
        if np.linalg.eigvalsh(a).min() < -1e-12:
            raise ConfigurationError("potential matrix must be positive semi-definite")
        object.__setattr__(self, "matrix", a)

    @classmethod
    def isotropic(cls, a: float, dim: int = 1) -> "QuadraticPotential":
        return cls(a * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def lipschitz_grad(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).max())

    def value(self, x) -> np.ndarray:
        pts = _as_points(x, self.dim)
        return 0.5 * np.einsum("...i,ij,...j->...", pts, self.matrix, pts)

    def gradient(self, x) -> np.ndarray:
        pts = _as_points(x, self.dim)
        return pts @ self.matrix


@dataclass(frozen=True, eq=False)
class CustomPotential:
    """User-supplied potential with V(0)=0, grad V(0)=0 and Lipschitz gradient."""

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    lipschitz_grad: float
    dim: int = 1
    kind: str = field(default="custom", init=False, repr=False)

    def validate(self, n_samples: int = 2048, box: float = 5.0, seed: int = 0) -> None:
        origin = np.zeros((1, self.dim))
        if abs(float(np.asarray(self.value(origin)).ravel()[0])) > 1e-12:
            warnings.warn("custom potential has V(0) != 0", stacklevel=2)
        if np.max(np.abs(np.asarray(self.gradient(origin)))) > 1e-12:
            warnings.warn("custom potential has grad V(0) != 0", stacklevel=2)
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-box, box, size=(n_samples, self.dim))
        v_plus = np.asarray(self.value(pts), dtype=float)
        v_minus = np.asarray(self.value(-pts), dtype=float)
        if np.max(np.abs(v_plus - v_minus)) > 1e-9 * max(1.0, np.max(np.abs(v_plus))):
            warnings.warn("custom potential is not symmetric", stacklevel=2)


@dataclass(frozen=True)
class ConvexityEstimate:
    """Convexity modulus of grad V; exact for quadratic, sampled otherwise."""

    value: float
    exact: bool


def convexity_modulus(potential, n_pairs: int = 100_000, box: float = 5.0,
                      seed: int = 0) -> ConvexityEstimate:
    """inf over x != y of <x-y, grad V(x)-grad V(y)> / |x-y|^2.

    Quadratic potentials give the smallest eigenvalue of the matrix exactly.
    For custom potentials the infimum is not computable in general; the
    sampled minimum of the quotient over random pairs in ``[-box, box]^d`` is
    returned and flagged as an estimate.
    """
    if isinstance(potential, QuadraticPotential):
        return ConvexityEstimate(float(np.linalg.eigvalsh(potential.matrix).min()), True)
    rng = np.random.default_rng(seed)
    d = potential.dim
    x = rng.uniform(-box, box, size=(n_pairs, d))
    y = rng.uniform(-box, box, size=(n_pairs, d))
    diff = x - y
    norm2 = np.sum(diff * diff, axis=-1)
    keep = norm2 > 1e-16
    gdiff = np.asarray(potential.gradient(x)) - np.asarray(potential.gradient(y))
    quot = np.sum(diff[keep] * gdiff[keep], axis=-1) / norm2[keep]
    return ConvexityEstimate(float(quot.min()), False)


# ---------------------------------------------------------------------------
# Initial chemical field
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZeroField:
    """h0 = 0 (any dimension; shapes follow the query points)."""

    kind: str = field(default="zero", init=False, repr=False)

    @staticmethod
    def _pts(x) -> np.ndarray:
        pts = np.asarray(x, dtype=float)
        return pts.reshape(1, 1) if pts.ndim == 0 else pts

    def value(self, x) -> np.ndarray:
        pts = self._pts(x)
        return np.zeros(pts.shape[:-1])

    def gradient(self, x) -> np.ndarray:
        return np.zeros_like(self._pts(x))

    def sup_norms(self) -> tuple[float, float, float]:
        return 0.0, 0.0, 0.0

    def q_value(self, t: float, x, alpha: float):
        pts = self._pts(x)
        return np.zeros(pts.shape[:-1])

    def q_gradient(self, t: float, x, alpha: float):
        return np.zeros_like(self._pts(x))


@dataclass(frozen=True)
class GaussianBumpField:
    """h0(x) = amplitude * exp(-|x|^2 / (2 variance)).

    The heat semigroup maps this bump to another Gaussian bump, so the
    evolved field ``Q_t h0`` and its gradient are available in closed form.
    """

    amplitude: float
    variance: float
    dim: int = 1
    kind: str = field(default="gaussian_bump", init=False, repr=False)

    def __post_init__(self):
        if self.variance <= 0:
            raise ConfigurationError("gaussian bump variance must be > 0")

    def value(self, x) -> np.ndarray:
        pts = _as_points(x, self.dim)
        r2 = np.sum(pts * pts, axis=-1)
        return self.amplitude * np.exp(-r2 / (2.0 * self.variance))

    def gradient(self, x, dim: int | None = None) -> np.ndarray:
        pts = _as_points(x, self.dim)
        return -pts / self.variance * self.value(pts)[..., np.newaxis]

    def sup_norms(self) -> tuple[float, float, float]:
        a = abs(self.amplitude)
        return (a,
                a * math.exp(-0.5) / math.sqrt(self.variance),
                a / self.variance)

    def q_value(self, t: float, x, alpha: float, dim: int | None = None):
        pts = _as_points(x, self.dim)
        v = self.variance + t
        r2 = np.sum(pts * pts, axis=-1)
        scale = (self.variance / v) ** (self.dim / 2.0)
        return math.exp(-alpha * t) * self.amplitude * scale * np.exp(-r2 / (2.0 * v))

    def q_gradient(self, t: float, x, alpha: float, dim: int | None = None):
        pts = _as_points(x, self.dim)
        v = self.variance + t
        return -pts / v * self.q_value(t, pts, alpha)[..., np.newaxis]


# Gauss-Hermite rule used for Q_t of custom fields (probabilists' weights).
_HERMITE_NODES, _HERMITE_WEIGHTS = np.polynomial.hermite_e.hermegauss(64)
_HERMITE_WEIGHTS = _HERMITE_WEIGHTS / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class CustomField:
    """User-supplied C^2_b initial field with declared sup norms (d = 1 only)."""

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    sup_h0: float = 0.0
    sup_grad_h0: float = 0.0
    sup_hess_h0: float = 0.0
    dim: int = 1
    kind: str = field(default="custom", init=False, repr=False)

    def sup_norms(self) -> tuple[float, float, float]:
        return float(self.sup_h0), float(self.sup_grad_h0), float(self.sup_hess_h0)

    def q_value(self, t: float, x, alpha: float, dim: int | None = None):
        # E[h0(x + B_t)] e^{-alpha t} by Gauss-Hermite quadrature in B_t.
        if self.dim != 1:
            raise NotImplementedError("custom initial fields support d = 1 only")
        pts = _as_points(x, 1)
        if t == 0.0:
            return np.asarray(self.value(pts), dtype=float).reshape(pts.shape[:-1])
        shifted = pts[..., 0][..., None] + math.sqrt(t) * _HERMITE_NODES
        vals = np.asarray(self.value(shifted[..., None]), dtype=float).reshape(shifted.shape)
        return math.exp(-alpha * t) * vals @ _HERMITE_WEIGHTS

    def q_gradient(self, t: float, x, alpha: float, dim: int | None = None):
        if self.dim != 1:
            raise NotImplementedError("custom initial fields support d = 1 only")
        pts = _as_points(x, 1)
        if t == 0.0:
            return np.asarray(self.gradient(pts), dtype=float).reshape(pts.shape)
        shifted = pts[..., 0][..., None] + math.sqrt(t) * _HERMITE_NODES
        grads = np.asarray(self.gradient(shifted[..., None]), dtype=float).reshape(shifted.shape)
        return (math.exp(-alpha * t) * grads @ _HERMITE_WEIGHTS)[..., None]


# ---------------------------------------------------------------------------
# Initial particle distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointMassInit:
    x0: tuple[float, ...] | float = 0.0
    dim: int = 1
    kind: str = field(default="point_mass", init=False, repr=False)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        x0 = np.broadcast_to(np.atleast_1d(np.asarray(self.x0, dtype=float)), (self.dim,))
        return np.tile(x0, (n, 1))

    @property
    def has_square_exp_moment(self) -> bool:
        return True


@dataclass(frozen=True)
class GaussianInit:
    mean: float = 0.0
    variance: float = 1.0
    dim: int = 1
    kind: str = field(default="gaussian", init=False, repr=False)

    def __post_init__(self):
        if self.variance <= 0:
            raise ConfigurationError("initial gaussian variance must be > 0")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + math.sqrt(self.variance) * rng.standard_normal((n, self.dim))

    @property
    def has_square_exp_moment(self) -> bool:
        return True


@dataclass(frozen=True)
class UniformInit:
    low: float = -1.0
    high: float = 1.0
    dim: int = 1
    kind: str = field(default="uniform", init=False, repr=False)

    def __post_init__(self):
        if not self.low < self.high:
            raise ConfigurationError("uniform initial interval must have low < high")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, self.dim))

    @property
    def has_square_exp_moment(self) -> bool:
        return True  # compactly supported


# ---------------------------------------------------------------------------
# Derived constants and assumption checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionReport:
    """Result of the convexity-dominance check v_star > lambda."""

    v_star: float
    lambda_threshold: float
    satisfied: bool
    margin: float
    v_star_exact: bool = True

    def to_dict(self) -> dict:
        return {
            "v_star": self.v_star,
            "lambda_threshold": self.lambda_threshold,
            "satisfied": self.satisfied,
            "margin": self.margin,
            "v_star_exact": self.v_star_exact,
        }


@dataclass(frozen=True)
class TheoreticalConstants:
    """Constants controlling the uniform-in-time deviation bound.

    ``r1 > 0 > r2`` are the roots of ``r^2 - (lambda_tilde - alpha) r - c2_tilde``.
    ``poc_bound_const`` is ``c3_tilde/(r1-r2) * (1 + alpha/(lambda_tilde-r1))``;
    it bounds ``sqrt(N) * sup_t sqrt(E|X - Xbar|^2)`` and is only meaningful
    (``bound_available``) when ``lambda_tilde > r1``, which is equivalent to
    the convexity-dominance assumption.
    """

    v_star: float
    lambda_threshold: float
    c1: float
    c2: float
    c3: float
    lambda_tilde: float
    c2_tilde: float
    c3_tilde: float
    r1: float
    r2: float
    poc_bound_const: Optional[float]

    @property
    def bound_available(self) -> bool:
        return self.poc_bound_const is not None

    def to_dict(self) -> dict:
        return {
            "v_star": self.v_star,
            "lambda_threshold": self.lambda_threshold,
            "c1": self.c1,
            "c2": self.c2,
            "c3": self.c3,
            "lambda_tilde": self.lambda_tilde,
            "c2_tilde": self.c2_tilde,
            "c3_tilde": self.c3_tilde,
            "r1": self.r1,
            "r2": self.r2,
            "poc_bound_const": self.poc_bound_const,
            "bound_available": self.bound_available,
        }


def check_assumption_a(params: ModelParams, kernel, h0, potential) -> AssumptionReport:
    """Check v_star > lambda = (sup_hess_h0 + 2 beta sup_hess_g / alpha) chi d."""
    _, _, sup_hess_g = kernel.sup_norms()
    _, _, sup_hess_h0 = h0.sup_norms()
    lam = (sup_hess_h0 + 2.0 * params.beta * sup_hess_g / params.alpha) * params.chi * params.dim
    est = convexity_modulus(potential)
    margin = est.value - lam
    return AssumptionReport(est.value, lam, margin > 0.0, margin, est.exact)


def compute_constants(params: ModelParams, kernel, h0, potential) -> TheoreticalConstants:
    sup_g, sup_grad_g, sup_hess_g = kernel.sup_norms()
    _, _, sup_hess_h0 = h0.sup_norms()
    d = params.dim
    c1 = d * sup_hess_h0
    c2 = d * sup_hess_g
    c3 = sup_grad_g
    v_star = convexity_modulus(potential).value
    lam = (sup_hess_h0 + 2.0 * params.beta * sup_hess_g / params.alpha) * params.chi * d
    lam_t = v_star - c1 * params.chi - c2 * params.chi * params.beta / params.alpha
    c2_t = c2 * params.chi * params.beta
    c3_t = 2.0 * c3 * params.chi * params.beta / params.alpha
    half_trace = lam_t - params.alpha
    disc = math.sqrt(half_trace * half_trace + 4.0 * c2_t)
    r1 = 0.5 * (half_trace + disc)
    r2 = 0.5 * (half_trace - disc)
    poc = None
    if lam_t > r1 and r1 > r2:
        poc = c3_t / (r1 - r2) * (1.0 + params.alpha / (lam_t - r1))
    return TheoreticalConstants(
        v_star=v_star, lambda_threshold=lam,
        c1=c1, c2=c2, c3=c3,
        lambda_tilde=lam_t, c2_tilde=c2_t, c3_tilde=c3_t,
        r1=r1, r2=r2, poc_bound_const=poc,
    )


def field_gradient_bound(params: ModelParams, kernel, h0, t: float) -> float:
    """Uniform bound exp(-alpha t) sup|grad h0| + beta sup|grad g| / alpha on |grad h(t, .)|."""
    if t < 0:
        raise ValueError(f"time must be >= 0, got {t}")
    _, sup_grad_g, _ = kernel.sup_norms()
    _, sup_grad_h0, _ = h0.sup_norms()
    return math.exp(-params.alpha * t) * sup_grad_h0 + params.beta * sup_grad_g / params.alpha


def second_moment_level(params: ModelParams, kernel, h0, potential) -> float:
    """Monitoring level (2/v*) (kappa^2/(2 v*) + 2) for sup_n E|Y_n|^2, v* > 0.

    ``kappa`` is twice the uniform bound on the non-contracting drift part,
    chi (beta sup|grad g|/alpha + sup|grad h0|).
    """
    v_star = convexity_modulus(potential).value
    if v_star <= 0:
        return math.inf
    _, sup_grad_g, _ = kernel.sup_norms()
    _, sup_grad_h0, _ = h0.sup_norms()
    kappa = 2.0 * params.chi * (params.beta * sup_grad_g / params.alpha + sup_grad_h0)
    return (2.0 / v_star) * (kappa * kappa / (2.0 * v_star) + 2.0)


# ---------------------------------------------------------------------------
# Bundled instance
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelInstance:
    """A complete problem instance; all components are immutable."""

    params: ModelParams
    kernel: GaussianKernel | CustomKernel
    potential: QuadraticPotential | CustomPotential
    h0: ZeroField | GaussianBumpField | CustomField
    mu0: PointMassInit | GaussianInit | UniformInit

    @property
    def dim(self) -> int:
        return self.params.dim

    def constants(self) -> TheoreticalConstants:
        return compute_constants(self.params, self.kernel, self.h0, self.potential)

    def assumption_report(self) -> AssumptionReport:
        return check_assumption_a(self.params, self.kernel, self.h0, self.potential)

    def grad_bound(self, t: float) -> float:
        return field_gradient_bound(self.params, self.kernel, self.h0, t)

    def m2_level(self) -> float:
        return second_moment_level(self.params, self.kernel, self.h0, self.potential)


def default_instance() -> ModelInstance:
    """Desk-scale instance: d=1, alpha=beta=chi=1, gaussian kernel delta=1, h0=0, V=x^2/2."""
    return ModelInstance(
        params=ModelParams(alpha=1.0, beta=1.0, chi=1.0, dim=1),
        kernel=GaussianKernel(delta=1.0, dim=1),
        potential=QuadraticPotential.isotropic(1.0, dim=1),
        h0=ZeroField(),
        mu0=GaussianInit(mean=0.0, variance=0.25, dim=1),
    )
