"""Empirical-measure functionals: transport distances, moments, tails, rate fits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "EmpiricalMeasure",
    "DistanceReport",
    "MomentReport",
    "TailReport",
    "read_point_cloud",
    "w1_1d",
    "w2_1d",
    "wp_assignment",
    "sliced_w1",
    "sq_exp_moment",
    "increment_moment",
    "tail_probability",
    "wilson_interval",
    "slope_fit",
]

ASSIGNMENT_SIZE_CAP = 512
_EXP_ARG_CAP = 700.0  # exp overflow threshold for float64


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Uniformly weighted point cloud, points of shape (M, d)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("empirical measure needs an (M, d) array with M >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("empirical measure has non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _points(mu) -> np.ndarray:
    if isinstance(mu, EmpiricalMeasure):
        return mu.points
    return EmpiricalMeasure(np.asarray(mu)).points


def read_point_cloud(path) -> EmpiricalMeasure:
    """Batch-mode input: one point per CSV row, coordinates as columns.

    Comment lines starting with '#' and a single non-numeric header row are
    skipped.
    """
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                if rows:
                    raise
                continue  # header row
    if not rows:
        raise ValueError(f"no points found in {path}")
    return EmpiricalMeasure(np.asarray(rows))


@dataclass(frozen=True)
class DistanceReport:
    value: float
    method: str              # quantile_1d | assignment | sliced
    exact: bool
    p: int
    std_error: Optional[float] = None
    n_projections: Optional[int] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def _quantile_1d(mu, nu, p: int) -> DistanceReport:
    a = _points(mu)
    b = _points(nu)
    if a.shape[1] != 1 or b.shape[1] != 1:
        raise ValueError("quantile transport is 1-d only; use wp_assignment for d >= 2")
    if a.shape[0] != b.shape[0]:
        raise ValueError(
            f"sample counts differ ({a.shape[0]} vs {b.shape[0]}); "
            "v1 quantile transport needs equal sizes -- use wp_assignment")
    xs = np.sort(a[:, 0])
    ys = np.sort(b[:, 0])
    cost = np.mean(np.abs(xs - ys) ** p)
    return DistanceReport(float(cost ** (1.0 / p)), "quantile_1d", True, p)


def w1_1d(mu, nu) -> DistanceReport:
    """Exact 1-d Wasserstein-1 between equal-size clouds (sorted pairing)."""
    return _quantile_1d(mu, nu, 1)


def w2_1d(mu, nu) -> DistanceReport:
    """Exact 1-d Wasserstein-2 between equal-size clouds."""
    return _quantile_1d(mu, nu, 2)


def wp_assignment(mu, nu, p: int = 2) -> DistanceReport:
    """Exact W_p by optimal assignment on the |x_i - y_j|^p cost matrix.

    Capped at M <= 512 points (the solver is O(M^3)); use :func:`sliced_w1`
    beyond the cap.
    """
    a = _points(mu)
    b = _points(nu)
    if a.shape[0] != b.shape[0]:
        raise ValueError("assignment transport needs equal sample counts")
    if a.shape[0] > ASSIGNMENT_SIZE_CAP:
        raise ValueError(
            f"assignment capped at M <= {ASSIGNMENT_SIZE_CAP} (O(M^3)); use sliced_w1")
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch between clouds")
    if a.shape[1] > 3:
        raise ValueError("assignment transport supports d <= 3")
    if p not in (1, 2):
        raise ValueError("only p in {1, 2} is supported")
    diff = a[:, None, :] - b[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    cost = dist if p == 1 else dist * dist
    rows, cols = linear_sum_assignment(cost)
    value = float(np.mean(cost[rows, cols]) ** (1.0 / p))
    return DistanceReport(value, "assignment", True, p)


def sliced_w1(mu, nu, n_projections: int = 64,
              rng: np.random.Generator | None = None) -> DistanceReport:
    """Monte-Carlo sliced W_1 for d >= 2: mean 1-d W_1 over random directions."""
    a = _points(mu)
    b = _points(nu)
    if a.shape[1] < 2:
        raise ValueError("sliced transport is for d >= 2; use w1_1d in one dimension")
    if a.shape[0] != b.shape[0]:
        raise ValueError("sliced transport needs equal sample counts (v1)")
    if rng is None:
        rng = np.random.default_rng(0)
    dirs = rng.standard_normal((n_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    per_dir = np.mean(np.abs(pa - pb), axis=0)
    se = float(per_dir.std(ddof=1) / math.sqrt(n_projections)) if n_projections > 1 else 0.0
    return DistanceReport(float(per_dir.mean()), "sliced", False, 1,
                          std_error=se, n_projections=n_projections)


@dataclass(frozen=True)
class MomentReport:
    value: float
    std_error: float
    theta: Optional[float] = None
    p: Optional[float] = None
    infinite: bool = False

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def sq_exp_moment(mu, theta: float) -> MomentReport:
    """Sample mean of exp(theta |x|^2) with standard error.

    Exponent arguments past the float64 cap mark the report infinite instead
    of producing non-finite numbers.
    """
    if theta <= 0:
        raise ValueError(f"theta must be > 0, got {theta}")
    pts = _points(mu)
    args = theta * np.sum(pts * pts, axis=-1)
    if np.any(args > _EXP_ARG_CAP):
        return MomentReport(math.inf, math.inf, theta=theta, infinite=True)
    vals = np.exp(args)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return MomentReport(float(vals.mean()), se, theta=theta)


def increment_moment(trajectories: np.ndarray, s: float, t: float, p: float,
                     eps: float) -> MomentReport:
    """Monte-Carlo estimate of E|X_t - X_s|^p from stored trajectories.

    ``trajectories`` has shape (n_steps+1, N, d) (or a list of such arrays
    across replications); ``s`` and ``t`` must be grid times.
    """
    if isinstance(trajectories, np.ndarray):
        trajectories = [trajectories]

    def index_of(time: float) -> int:
        idx = time / eps
        if abs(idx - round(idx)) > 1e-9:
            raise ValueError(f"time {time} is not a multiple of the step {eps}")
        return int(round(idx))

    i, j = index_of(s), index_of(t)
    samples = []
    for traj in trajectories:
        if max(i, j) >= traj.shape[0]:
            raise ValueError("requested time beyond the stored horizon")
        diff = traj[j] - traj[i]
        samples.append(np.linalg.norm(diff, axis=-1) ** p)
    vals = np.concatenate(samples)
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return MomentReport(float(vals.mean()), se, p=p)


def wilson_interval(successes: int, total: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if total <= 0:
        raise ValueError("total must be positive")
    phat = successes / total
    z2 = z * z
    denom = 1.0 + z2 / total
    center = (phat + z2 / (2 * total)) / denom
    half = z * math.sqrt(phat * (1 - phat) / total + z2 / (4 * total * total)) / denom
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == total else min(1.0, center + half)
    return lo, hi


@dataclass(frozen=True)
class TailReport:
    estimate: float
    lower: float
    upper: float
    exceedances: int
    total: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def tail_probability(samples, eps: float, min_replications: int = 30) -> TailReport:
    """Binomial estimate of P(W_1 > eps) across replications with Wilson 95% interval."""
    vals = np.asarray(samples, dtype=float).ravel()
    if vals.size < min_replications:
        raise ValueError(
            f"tail estimation needs >= {min_replications} replications, got {vals.size}")
    k = int(np.sum(vals > eps))
    lo, hi = wilson_interval(k, vals.size)
    return TailReport(k / vals.size, lo, hi, k, vals.size)


def slope_fit(x, y) -> tuple[float, float, float]:
    """Ordinary least squares on already-transformed data; returns (slope, intercept, R^2)."""
    xv = np.asarray(x, dtype=float).ravel()
    yv = np.asarray(y, dtype=float).ravel()
    if xv.size != yv.size or xv.size < 3:
        raise ValueError("slope fit needs at least 3 matched points")
    if np.ptp(xv) <= 0:
        raise ValueError("degenerate abscissae: all x values equal")
    xm, ym = xv.mean(), yv.mean()
    sxx = np.sum((xv - xm) ** 2)
    sxy = np.sum((xv - xm) * (yv - ym))
    slope = sxy / sxx
    intercept = ym - slope * xm
    resid = yv - (slope * xv + intercept)
    syy = np.sum((yv - ym) ** 2)
    r2 = 1.0 if syy == 0 else 1.0 - float(np.sum(resid * resid) / syy)
    return float(slope), float(intercept), r2
