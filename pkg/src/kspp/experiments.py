"""Experiment drivers: scenario configs, verdict logic, result persistence.

Each driver runs the simulations, reduces them to a results table, and applies
the documented verdict bands.  The verdict functions themselves are pure over
the tables so they can be unit-tested with synthetic data.

Verdict bands are artifact choices sized for Monte-Carlo noise at the default
replication counts: slope in [-1.3, -0.7] for the deviation decay in N, slope
in [0.7, 1.3] for the step-size decay, a factor 4 of slack on the theoretical
deviation bound (covering reference bias and sampling error), plateau ratio
1.5, and late/early ratio 2 for uniformity in time.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, rngstream
from .metrics import slope_fit, tail_probability, w1_1d, wilson_interval
from .model import ConfigurationError, ModelInstance
from .simulate import (
    CoupledRunConfig,
    EulerConfig,
    RunRecord,
    epsilon_threshold,
    refine_reference,
    run_coupled_poc,
    run_particle_system,
    simulate_nonlinear_reference,
    _geometry,
    _map_indexed,
)

__all__ = [
    "RefusalError",
    "ScenarioConfig",
    "ExperimentResult",
    "run_experiment",
    "exp_poc_finite",
    "exp_poc_uniform",
    "exp_euler_rate",
    "exp_concentration",
    "exp_field_bounds",
    "write_results_csv",
    "write_manifest",
]

POC_SLOPE_BAND = (-1.3, -0.7)
EULER_SLOPE_BAND = (0.7, 1.3)
POC_BOUND_SLACK = 4.0
PLATEAU_RATIO_MAX = 1.5
LATE_EARLY_RATIO_MAX = 2.0
GRAD_BOUND_TOL = 1e-3
CONCENTRATION_MIN_R = 30
CONCENTRATION_R2_MIN = 0.8

EXPERIMENTS = ("constants", "simulate", "poc_finite", "poc_uniform",
               "euler_rate", "concentration", "field_bounds")


class RefusalError(ConfigurationError):
    """An experiment precondition failed; nothing was run."""


@dataclass(frozen=True)
class ScenarioConfig:
    """One experiment invocation, fully determined by (config file, seed)."""

    experiment: str
    model: ModelInstance
    seed: int
    epsilon: float = 0.01
    horizon: float = 5.0
    n_particles: int = 128
    field_method: str = "grid"
    grid_length: Optional[float] = None
    grid_points: Optional[int] = None
    n_values: tuple = ()
    n_ref: int = 0                      # 0 means 16 x the largest compared N
    replications: int = 16
    epsilons: tuple = ()                # euler-rate step sizes
    refine_levels: int = 4
    thresholds: tuple = ()              # concentration W1 thresholds
    finite_time: float = 2.0            # concentration finite-horizon checkpoint
    snapshot_steps: tuple = ()
    workers: int = 1
    raw: dict = field(default_factory=dict)

    def n_steps(self, epsilon: Optional[float] = None) -> int:
        eps = self.epsilon if epsilon is None else epsilon
        n = self.horizon / eps
        if abs(n - round(n)) > 1e-9:
            raise ConfigurationError(
                f"horizon {self.horizon} is not a whole number of steps of size {eps}")
        return int(round(n))

    def base_config(self, **overrides) -> EulerConfig:
        kw = dict(epsilon=self.epsilon, n_steps=self.n_steps(),
                  n_particles=self.n_particles, seed=self.seed,
                  field_method=self.field_method,
                  grid_length=self.grid_length, grid_points=self.grid_points,
                  snapshot_steps=self.snapshot_steps)
        kw.update(overrides)
        return EulerConfig(**kw)


@dataclass
class ExperimentResult:
    name: str
    table: list                         # list of row dicts, CSV-ready
    verdicts: dict                      # name -> bool
    details: dict = field(default_factory=dict)
    max_grad_violation: float = -math.inf
    series: dict = field(default_factory=dict)   # extra named CSV tables

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())


# ---------------------------------------------------------------------------
# Pure verdict helpers
# ---------------------------------------------------------------------------


def poc_finite_verdict(n_values, sup_devs) -> dict:
    """Slope of log sup-deviation^2 against log N, checked against the band."""
    out = {"slope": None, "r2": None, "decoupled": False, "fit_skipped": False}
    if max(sup_devs) <= 0.0:
        out.update(decoupled=True, fit_skipped=True, in_band=True)
        return out
    if len(n_values) < 2:
        out.update(fit_skipped=True, in_band=True)
        return out
    if len(n_values) == 2:
        slope = (math.log(sup_devs[1]) - math.log(sup_devs[0])) / \
            (math.log(n_values[1]) - math.log(n_values[0]))
        out.update(slope=slope, in_band=POC_SLOPE_BAND[0] <= slope <= POC_SLOPE_BAND[1])
        return out
    slope, _, r2 = slope_fit(np.log(n_values), np.log(sup_devs))
    out.update(slope=slope, r2=r2,
               in_band=POC_SLOPE_BAND[0] <= slope <= POC_SLOPE_BAND[1])
    return out


def poc_uniform_verdict(times, dev_mean, n_particles, poc_bound_const) -> dict:
    """Plateau ratio and theoretical-bound comparison for the uniform regime."""
    t_end = times[-1]
    sup_all = float(np.max(dev_mean))
    if sup_all <= 0.0:
        return {"decoupled": True, "plateau_ok": True, "bound_ok": True,
                "plateau_ratio": 0.0, "n_sup_dev": 0.0,
                "bound_value": POC_BOUND_SLACK * poc_bound_const ** 2}
    late = dev_mean[(times >= t_end / 2)]
    mid = dev_mean[(times >= t_end / 4) & (times < t_end / 2)]
    ratio = float(late.max() / mid.max())
    n_sup = n_particles * sup_all
    bound = POC_BOUND_SLACK * poc_bound_const ** 2
    return {"decoupled": False,
            "plateau_ratio": ratio, "plateau_ok": ratio <= PLATEAU_RATIO_MAX,
            "n_sup_dev": n_sup, "bound_value": bound, "bound_ok": n_sup <= bound}


def euler_rate_verdict(eps_values, mse_early, mse_late) -> dict:
    """Root-mean-square-error decay rate in the step size, plus time uniformity.

    The slope is fitted on log RMSE (half of log MSE): with additive noise the
    scheme's strong order is 1, so the RMSE is the quantity whose decay
    exponent sits at 1 (the shared-noise coarse-vs-fine comparison for the
    pure confinement case has analytic MSE slope 2, RMSE slope 1).
    """
    slope_e, _, r2_e = slope_fit(np.log(eps_values), 0.5 * np.log(mse_early))
    slope_l, _, r2_l = slope_fit(np.log(eps_values), 0.5 * np.log(mse_late))
    ratios = np.asarray(mse_late) / np.asarray(mse_early)
    lo, hi = EULER_SLOPE_BAND
    return {"slope_early": slope_e, "slope_late": slope_l,
            "r2_early": r2_e, "r2_late": r2_l,
            "early_in_band": lo <= slope_e <= hi,
            "late_in_band": lo <= slope_l <= hi,
            "max_late_early_ratio": float(ratios.max()),
            "ratio_ok": bool(ratios.max() <= LATE_EARLY_RATIO_MAX)}


def concentration_verdict(rows) -> dict:
    """Monotonicity in N at fixed threshold plus the exponential-form fit.

    ``rows`` carry n, threshold, estimate, upper, exceedances, total.  Zero
    exceedance cells enter the rate fit through the continuity-corrected
    estimate (k + 0.5) / (R + 1); the table keeps the raw estimates.
    """
    by_threshold: dict = {}
    for r in rows:
        by_threshold.setdefault(r["threshold"], []).append(r)
    monotone = True
    for cells in by_threshold.values():
        cells = sorted(cells, key=lambda c: c["n"])
        for prev, cur in zip(cells, cells[1:]):
            if cur["estimate"] > prev["upper"]:
                monotone = False
    xs, ys = [], []
    for r in rows:
        corrected = (r["exceedances"] + 0.5) / (r["total"] + 1.0)
        xs.append(r["n"] * r["threshold"] ** 2)
        ys.append(-math.log(corrected))
    slope, _, r2 = slope_fit(xs, ys)
    return {"monotone_in_n": monotone, "slope": slope, "r2": r2,
            "slope_positive": slope > 0.0, "fit_ok": slope > 0.0 and r2 >= CONCENTRATION_R2_MIN}


def field_bounds_verdict(max_grad_violation, max_lipschitz_violation,
                         tol: float = GRAD_BOUND_TOL) -> dict:
    return {"grad_bound_ok": max_grad_violation <= tol,
            "lipschitz_ok": max_lipschitz_violation <= tol,
            "max_grad_violation": max_grad_violation,
            "max_lipschitz_violation": max_lipschitz_violation}


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise RefusalError(message)


def exp_poc_finite(sc: ScenarioConfig) -> ExperimentResult:
    """Finite-horizon deviation decay in N (coupled runs against a reference replay)."""
    _require(len(sc.n_values) >= 1, "poc_finite needs a nonempty n_values sweep")
    _require(sc.replications >= 1, "poc_finite needs replications >= 1")
    n_ref = sc.n_ref or 16 * max(sc.n_values)
    table = []
    sups = []
    violation = -math.inf
    for n in sc.n_values:
        cc = CoupledRunConfig(
            base=sc.base_config(n_particles=n, deposit_method="fft"),
            n_ref=n_ref, replications=sc.replications)
        rec = run_coupled_poc(sc.model, cc, workers=sc.workers)
        per_rep_sup = rec.per_rep.max(axis=1)
        sup = float(per_rep_sup.mean())
        se = float(per_rep_sup.std(ddof=1) / math.sqrt(sc.replications)) \
            if sc.replications > 1 else 0.0
        sups.append(sup)
        violation = max(violation, rec.max_grad_violation)
        table.append({"n": n, "n_ref": n_ref, "sup_dev_sq": sup, "std_error": se,
                      "n_times_sup": n * sup,
                      "ref_bias_scale": rec.reference_bias_scale})
    fit = poc_finite_verdict(list(sc.n_values), sups)
    verdicts = {"slope_in_band": fit.get("in_band", True),
                "grad_bound_ok": violation <= GRAD_BOUND_TOL}
    return ExperimentResult("poc_finite", table, verdicts, details=fit,
                            max_grad_violation=violation)


def exp_poc_uniform(sc: ScenarioConfig) -> ExperimentResult:
    """Long-horizon deviation plateau and comparison with the theoretical constant."""
    report = sc.model.assumption_report()
    _require(report.satisfied,
             f"convexity dominance fails (v*={report.v_star:.4f} <= "
             f"lambda={report.lambda_threshold:.4f}, margin={report.margin:.4f}); "
             "the uniform-in-time experiment requires it")
    constants = sc.model.constants()
    _require(constants.bound_available, "theoretical bound constant unavailable")
    n_ref = sc.n_ref or 16 * sc.n_particles
    cc = CoupledRunConfig(base=sc.base_config(deposit_method="fft"),
                          n_ref=n_ref, replications=sc.replications)
    rec = run_coupled_poc(sc.model, cc, workers=sc.workers)
    fit = poc_uniform_verdict(rec.times, rec.deviation_sq, sc.n_particles,
                              constants.poc_bound_const)
    verdicts = {"plateau_ok": fit["plateau_ok"], "bound_ok": fit["bound_ok"],
                "grad_bound_ok": rec.max_grad_violation <= GRAD_BOUND_TOL}
    table = [{"t": float(t), "dev_sq": float(v), "std_error": float(se)}
             for t, v, se in zip(rec.times, rec.deviation_sq, rec.deviation_se)]
    details = dict(fit)
    details.update(n=sc.n_particles, n_ref=n_ref,
                   poc_bound_const=constants.poc_bound_const,
                   ref_bias_scale=rec.reference_bias_scale)
    return ExperimentResult("poc_uniform", table, verdicts, details=details,
                            max_grad_violation=rec.max_grad_violation)


def exp_euler_rate(sc: ScenarioConfig) -> ExperimentResult:
    """Step-size convergence against a noise-shared refined run."""
    report = sc.model.assumption_report()
    _require(report.satisfied, "euler_rate requires the convexity-dominance assumption")
    _require(len(sc.epsilons) >= 2, "euler_rate needs at least two step sizes")
    eps0 = epsilon_threshold(sc.model)
    v_star = sc.model.constants().v_star
    for eps in sc.epsilons:
        _require(eps <= eps0,
                 f"step size {eps} exceeds the stability threshold eps0={eps0:.4f}")
        _require(0.0 < 1.0 - eps * v_star / 2.0 < 1.0,
                 f"contraction factor 1 - eps v*/2 leaves (0,1) at eps={eps}")

    def one_eps(eps: float):
        n_steps = sc.n_steps(eps)
        early = max(1, n_steps // 4)

        def one_rep(rep: int):
            cfg = sc.base_config(epsilon=eps, n_steps=n_steps, replication=rep,
                                 deposit_method="fft")
            rec = refine_reference(sc.model, cfg, sc.refine_levels)
            return rec.deviation_sq[early], rec.deviation_sq[-1], rec.max_grad_violation

        outs = _map_indexed(one_rep, sc.replications, 1)
        e = np.array([o[0] for o in outs])
        l = np.array([o[1] for o in outs])
        viol = max(o[2] for o in outs)
        return e, l, viol, early * eps

    results = _map_indexed(lambda i: one_eps(sc.epsilons[i]), len(sc.epsilons), sc.workers)
    table = []
    mse_early, mse_late = [], []
    violation = -math.inf
    for eps, (e, l, viol, t_early) in zip(sc.epsilons, results):
        r = sc.replications
        table.append({"epsilon": eps, "t_early": t_early, "t_late": sc.horizon,
                      "mse_early": float(e.mean()),
                      "se_early": float(e.std(ddof=1) / math.sqrt(r)) if r > 1 else 0.0,
                      "mse_late": float(l.mean()),
                      "se_late": float(l.std(ddof=1) / math.sqrt(r)) if r > 1 else 0.0})
        mse_early.append(e.mean())
        mse_late.append(l.mean())
        violation = max(violation, viol)
    fit = euler_rate_verdict(list(sc.epsilons), mse_early, mse_late)
    verdicts = {"early_slope_in_band": fit["early_in_band"],
                "late_slope_in_band": fit["late_in_band"],
                "late_early_ratio_ok": fit["ratio_ok"],
                "grad_bound_ok": violation <= GRAD_BOUND_TOL}
    return ExperimentResult("euler_rate", table, verdicts, details=fit,
                            max_grad_violation=violation)


def _w1_against_reference(cloud: np.ndarray, ref_cloud: np.ndarray) -> float:
    """Exact 1-d W1 between an N-cloud and a reference cloud of size multiple of N."""
    n, m = cloud.shape[0], ref_cloud.shape[0]
    if m % n != 0:
        raise ConfigurationError(
            f"reference ensemble size {m} must be a multiple of the system size {n}")
    rep = np.repeat(np.sort(cloud[:, 0]), m // n)
    return w1_1d(rep[:, None], ref_cloud).value


def exp_concentration(sc: ScenarioConfig) -> ExperimentResult:
    """Tail estimates for P(W1(mu^N_t, proxy) > threshold) over an (N, threshold) grid."""
    _require(sc.model.mu0.has_square_exp_moment,
             "concentration needs an initial law with finite square-exponential moment")
    _require(sc.replications >= CONCENTRATION_MIN_R,
             f"concentration needs >= {CONCENTRATION_MIN_R} replications")
    _require(len(sc.n_values) >= 2 and len(sc.thresholds) >= 2,
             "concentration needs sweeps over both N and the threshold")
    report = sc.model.assumption_report()
    _require(report.satisfied,
             "the long-time concentration check requires convexity dominance")
    n_ref = sc.n_ref or 16 * max(sc.n_values)
    for n in sc.n_values:
        _require(n_ref % n == 0, f"n_ref={n_ref} must be a multiple of every N (got {n})")

    n_steps = sc.n_steps()
    step_mid = int(round(sc.finite_time / sc.epsilon))
    _require(0 < step_mid <= n_steps,
             f"finite_time {sc.finite_time} must be a grid time inside the horizon")

    ref_cfg = sc.base_config(n_particles=n_ref, record_trajectory=True,
                             deposit_method="fft")
    ref_run = run_particle_system(sc.model, ref_cfg, role=rngstream.ROLE_REFERENCE)
    ref_mid = ref_run.trajectory[step_mid]
    ref_end = ref_run.trajectory[-1]
    violation = ref_run.max_grad_violation

    samples: dict = {}
    for n in sc.n_values:
        def one_rep(rep: int, n=n):
            cfg = sc.base_config(n_particles=n, replication=rep,
                                 record_trajectory=True, deposit_method="fft")
            run = run_particle_system(sc.model, cfg)
            return (_w1_against_reference(run.trajectory[step_mid], ref_mid),
                    _w1_against_reference(run.trajectory[-1], ref_end),
                    run.max_grad_violation)

        outs = _map_indexed(one_rep, sc.replications, sc.workers)
        samples[n] = {"finite": np.array([o[0] for o in outs]),
                      "longtime": np.array([o[1] for o in outs])}
        violation = max(violation, max(o[2] for o in outs))

    table = []
    for checkpoint, t in (("finite", sc.finite_time), ("longtime", sc.horizon)):
        for n in sc.n_values:
            for thr in sc.thresholds:
                rep = tail_probability(samples[n][checkpoint], thr,
                                       min_replications=CONCENTRATION_MIN_R)
                table.append({"checkpoint": checkpoint, "t": t, "n": n,
                              "threshold": thr, "estimate": rep.estimate,
                              "lower": rep.lower, "upper": rep.upper,
                              "exceedances": rep.exceedances, "total": rep.total,
                              "n_eps_sq": n * thr * thr,
                              "ref_bias_scale": 1.0 / math.sqrt(n_ref)})
    longtime_rows = [r for r in table if r["checkpoint"] == "longtime"]
    fit = concentration_verdict(longtime_rows)
    verdicts = {"monotone_in_n": fit["monotone_in_n"],
                "exponential_form_ok": fit["fit_ok"],
                "grad_bound_ok": violation <= GRAD_BOUND_TOL}
    return ExperimentResult("concentration", table, verdicts, details=fit,
                            max_grad_violation=violation)


def exp_field_bounds(sc: ScenarioConfig) -> ExperimentResult:
    """Online gradient-bound and Lipschitz monitors over a full simulation."""
    n_steps = sc.n_steps()
    snaps = tuple(sorted(set([0, n_steps // 4, n_steps // 2, 3 * n_steps // 4, n_steps])))
    cfg = sc.base_config(snapshot_steps=snaps)
    geom = _geometry(sc.model, cfg)
    rec = run_particle_system(sc.model, cfg)

    params = sc.model.params
    _, _, sup_hess_g = sc.model.kernel.sup_norms()
    _, _, sup_hess_h0 = sc.model.h0.sup_norms()
    max_lip_violation = -math.inf
    lip_rows = []
    for step, snap in rec.snapshots.items():
        t = step * sc.epsilon
        bound = params.dim * (math.exp(-params.alpha * t) * sup_hess_h0
                              + params.beta * sup_hess_g / params.alpha)
        x, grad = snap["x"], snap["grad_h"]
        spacing = x[1] - x[0]
        inside = np.abs(x) <= geom.length - geom.margin  # probe pairs in the safe region
        quot = 0.0
        for stride in (1, 2, 4, 8, 16):
            dg = np.abs(grad[stride:] - grad[:-stride])
            keep = inside[stride:] & inside[:-stride]
            if np.any(keep):
                quot = max(quot, float(dg[keep].max() / (stride * spacing)))
        max_lip_violation = max(max_lip_violation, quot - bound)
        lip_rows.append({"step": step, "t": t, "max_quotient": quot,
                         "lipschitz_bound": bound,
                         "max_abs_grad": float(np.abs(grad).max()),
                         "grad_bound": sc.model.grad_bound(t)})
    fit = field_bounds_verdict(rec.max_grad_violation, max_lip_violation)
    verdicts = {"grad_bound_ok": fit["grad_bound_ok"], "lipschitz_ok": fit["lipschitz_ok"]}
    return ExperimentResult("field_bounds", lip_rows, verdicts, details=fit,
                            max_grad_violation=rec.max_grad_violation,
                            series={"snapshots": rec.snapshots})


_DRIVERS = {
    "poc_finite": exp_poc_finite,
    "poc_uniform": exp_poc_uniform,
    "euler_rate": exp_euler_rate,
    "concentration": exp_concentration,
    "field_bounds": exp_field_bounds,
}


def run_experiment(sc: ScenarioConfig) -> ExperimentResult:
    if sc.experiment not in _DRIVERS:
        raise ConfigurationError(f"unknown experiment {sc.experiment!r}; "
                                 f"choose from {sorted(_DRIVERS)}")
    return _DRIVERS[sc.experiment](sc)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_results_csv(path, rows, meta: Optional[dict] = None) -> None:
    """Rows to CSV with a versioned header comment; floats at 17 significant digits."""
    if not rows:
        raise ValueError("no rows to write")
    fieldnames = list(rows[0].keys())
    meta_str = " ".join(f"{k}={v}" for k, v in (meta or {}).items())
    with open(path, "w") as f:
        f.write(f"# kspp-results v1 {meta_str}".rstrip() + "\n")
        f.write(",".join(fieldnames) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[k]) for k in fieldnames) + "\n")


def write_manifest(directory, sc: ScenarioConfig, result: Optional[ExperimentResult],
                   started: float, finished: float,
                   outputs: Optional[list] = None) -> Path:
    """Atomically written run manifest; re-running from it reproduces the CSVs."""
    directory = Path(directory)
    roles = [rngstream.ROLE_SYSTEM, rngstream.ROLE_REFERENCE,
             rngstream.ROLE_COUPLED, rngstream.ROLE_REFINE]
    child_seeds = {str(role): [rngstream.child_seed(sc.seed, role, rep)
                               for rep in range(sc.replications)]
                   for role in roles}
    manifest = {
        "kind": "kspp-manifest",
        "version": 1,
        "code_version": __version__,
        "experiment": sc.experiment,
        "seed": sc.seed,
        "child_seeds": child_seeds,
        "config": sc.raw,
        "workers": sc.workers,
        "started_unix": started,
        "finished_unix": finished,
        "wall_seconds": finished - started,
        "outputs": outputs or [],
    }
    if result is not None:
        manifest["verdicts"] = result.verdicts
        manifest["passed"] = result.passed
        manifest["details"] = _jsonable(result.details)
    path = directory / "manifest.json"
    tmp = directory / "manifest.json.tmp"
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def persist_experiment(sc: ScenarioConfig, result: ExperimentResult,
                       out_dir, started: float) -> list:
    """Write results.csv (+ per-experiment extras) and the manifest; returns file list."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    meta = {"experiment": result.name, "seed": sc.seed}
    results_path = out / "results.csv"
    write_results_csv(results_path, result.table, meta)
    outputs.append(results_path.name)
    snapshots = result.series.get("snapshots") or {}
    if snapshots:
        snap_dir = out / "field_snapshots"
        snap_dir.mkdir(exist_ok=True)
        for step, snap in sorted(snapshots.items()):
            rows = [{"x": x, "h": h, "theta": th, "grad_h": g}
                    for x, h, th, g in zip(snap["x"], snap["h"], snap["theta"], snap["grad_h"])]
            p = snap_dir / f"step_{step:06d}.csv"
            write_results_csv(p, rows, {"experiment": result.name, "step": step})
            outputs.append(str(p.relative_to(out)))
    write_manifest(out, sc, result, started, time.time(), outputs)
    return outputs
