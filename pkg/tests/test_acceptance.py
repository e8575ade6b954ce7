"""Acceptance suite: every criterion at its stated tolerance, one verdict line each.

The heavy experiments run at the documented desk-scale settings (the shipped
config files), so this module is the slow part of the test suite; expect a few
minutes of wall time.  Each test prints `ACCEPTANCE <k>: PASS/FAIL` before
asserting so the verdict survives in captured output.
"""

import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest

from kspp.config import build_scenario, load_raw_config
from kspp.experiments import (
    exp_concentration,
    exp_euler_rate,
    exp_field_bounds,
    exp_poc_finite,
    exp_poc_uniform,
    persist_experiment,
)
from kspp.field import FieldGrid, HistoryBuffer, deposit_density, evaluate_h_direct
from kspp.metrics import w1_1d, w2_1d, wp_assignment
from kspp.model import default_instance
from kspp.simulate import EulerConfig, epsilon_threshold, run_particle_system

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def scenario(config_name: str, experiment: str):
    return build_scenario(load_raw_config(CONFIG_DIR / config_name), experiment)


def verdict_line(k: int, name: str, ok: bool, summary: str) -> None:
    print(f"ACCEPTANCE {k} ({name}): {'PASS' if ok else 'FAIL'} -- {summary}")


def test_criterion_01_constants_engine():
    start = time.perf_counter()
    model = default_instance()
    c = model.constants()
    report = model.assumption_report()
    # independent root-finder oracle on the characteristic polynomial
    roots = np.sort(np.roots([1.0, -(c.lambda_tilde - 1.0), -c.c2_tilde]))
    r2_oracle, r1_oracle = float(roots[0]), float(roots[1])
    poc_oracle = c.c3_tilde / (r1_oracle - r2_oracle) * (1.0 + 1.0 / (c.lambda_tilde - r1_oracle))
    elapsed = time.perf_counter() - start
    checks = {
        "lambda": math.isclose(report.lambda_threshold, 0.7978845608028654, rel_tol=1e-6),
        "lambda_tilde": math.isclose(c.lambda_tilde, 0.6010577195985674, rel_tol=1e-6),
        "r1": math.isclose(c.r1, r1_oracle, rel_tol=1e-6),
        "r2": math.isclose(c.r2, r2_oracle, rel_tol=1e-6),
        "poc_const": math.isclose(c.poc_bound_const, poc_oracle, rel_tol=1e-6),
        "poc_approx": math.isclose(c.poc_bound_const, 3.01, rel_tol=1e-3),
        "runtime": elapsed < 1.0,
    }
    ok = all(checks.values())
    verdict_line(1, "constants engine", ok,
                 f"r1={c.r1:.7f} r2={c.r2:.7f} poc={c.poc_bound_const:.4f} "
                 f"runtime={elapsed * 1e3:.1f}ms")
    assert ok, checks


def test_criterion_02_evaluator_equivalence():
    start = time.perf_counter()
    model = default_instance()
    eps, n_steps = 0.01, 200
    margin = 6.0 * math.sqrt(model.kernel.delta + n_steps * eps)
    rng = np.random.default_rng(12345)
    worst_h = worst_g = 0.0
    for _ in range(20):
        n_part = int(rng.integers(1, 9))
        pos = rng.uniform(-1.5, 1.5, size=(n_part, 1))
        grid = FieldGrid(model.params, model.kernel, model.h0, 12.0, 2048, margin)
        hist = HistoryBuffer(step=eps)
        for _ in range(n_steps):
            grid.advance(deposit_density(pos, model.kernel, grid, "exact"), eps)
            hist.append(pos)
        probes = rng.uniform(-grid.safe_bound, grid.safe_bound, size=50)
        h_dir, g_dir = evaluate_h_direct(hist, model.h0, model.params, model.kernel, probes)
        worst_h = max(worst_h, float(np.abs(grid.h_at(probes) - h_dir).max()))
        worst_g = max(worst_g, float(np.abs(grid.grad_h_at(probes) - g_dir[:, 0]).max()))
    elapsed = time.perf_counter() - start
    ok = worst_h <= 5e-3 and worst_g <= 5e-3 and elapsed < 60.0
    verdict_line(2, "evaluator equivalence", ok,
                 f"sup|h| err={worst_h:.2e} sup|grad h| err={worst_g:.2e} "
                 f"runtime={elapsed:.1f}s")
    assert ok


def test_criterion_03_poc_finite_rate():
    sc = scenario("default.toml", "poc_finite")
    assert tuple(sc.n_values) == (32, 64, 128, 256)
    assert sc.n_ref == 4096 and sc.replications == 16 and sc.epsilon == 0.01
    assert sc.horizon == 5.0
    res = exp_poc_finite(sc)
    slope = res.details["slope"]
    ok = res.passed and -1.3 <= slope <= -0.7
    verdict_line(3, "finite-horizon deviation rate", ok,
                 f"slope={slope:.3f} r2={res.details['r2']:.3f} "
                 f"sup_dev(N=256)={res.table[-1]['sup_dev_sq']:.2e}")
    assert ok, res.details


def test_criterion_04_poc_uniform():
    sc = scenario("poc_uniform.toml", "poc_uniform")
    assert sc.n_particles == 128 and sc.horizon == 20.0
    res = exp_poc_uniform(sc)
    d = res.details
    ok = res.passed and d["plateau_ratio"] <= 1.5 and d["n_sup_dev"] <= d["bound_value"]
    verdict_line(4, "uniform-in-time deviation", ok,
                 f"plateau_ratio={d['plateau_ratio']:.3f} "
                 f"N*sup={d['n_sup_dev']:.4f} <= {d['bound_value']:.1f}")
    assert ok, d


def test_criterion_05_euler_rate():
    sc = scenario("euler_rate.toml", "euler_rate")
    assert tuple(sc.epsilons) == (0.04, 0.02, 0.01, 0.005)
    assert sc.refine_levels == 4 and sc.replications == 16
    res = exp_euler_rate(sc)
    d = res.details
    ok = (res.passed and 0.7 <= d["slope_early"] <= 1.3 and 0.7 <= d["slope_late"] <= 1.3
          and d["max_late_early_ratio"] <= 2.0)
    verdict_line(5, "euler step-size rate", ok,
                 f"slope_early={d['slope_early']:.3f} slope_late={d['slope_late']:.3f} "
                 f"late/early={d['max_late_early_ratio']:.2f}")
    assert ok, d


def test_criterion_06_concentration_form():
    sc = scenario("concentration.toml", "concentration")
    assert sc.replications == 200
    assert len(sc.n_values) == 3 and len(sc.thresholds) == 3
    res = exp_concentration(sc)
    d = res.details
    ok = res.passed and d["monotone_in_n"] and d["slope"] > 0 and d["r2"] >= 0.8
    verdict_line(6, "concentration form", ok,
                 f"monotone={d['monotone_in_n']} slope={d['slope']:.3f} r2={d['r2']:.3f}")
    assert ok, d


def test_criterion_07_field_bound_monitors():
    sc = scenario("concentration.toml", "field_bounds")  # T = 10 run
    res = exp_field_bounds(sc)
    d = res.details
    ok = (res.passed and d["max_grad_violation"] <= 1e-3
          and d["max_lipschitz_violation"] <= 1e-3)
    verdict_line(7, "field-bound monitors", ok,
                 f"max grad violation={d['max_grad_violation']:.2e} "
                 f"max lipschitz violation={d['max_lipschitz_violation']:.2e}")
    assert ok, d


def test_criterion_08_metrics_oracles():
    rng = np.random.default_rng(2718)
    worst = 0.0
    count = 0
    for d, p in itertools.product((1, 2), (1, 2)):
        for _ in range(50):
            m = int(rng.integers(2, 9))
            a = rng.standard_normal((m, d))
            b = rng.standard_normal((m, d))
            got = wp_assignment(a, b, p=p).value
            best = min(np.mean(np.linalg.norm(a - b[list(perm)], axis=-1) ** p)
                       for perm in itertools.permutations(range(m))) ** (1.0 / p)
            worst = max(worst, abs(got - best))
            count += 1
    quantile_gap = 0.0
    axioms_ok = True
    for _ in range(40):
        a = rng.standard_normal((32, 1))
        b = rng.standard_normal((32, 1))
        c = rng.standard_normal((32, 1))
        w1, w2 = w1_1d(a, b).value, w2_1d(a, b).value
        quantile_gap = max(quantile_gap,
                           abs(wp_assignment(a, b, p=1).value - w1),
                           abs(wp_assignment(a, b, p=2).value - w2))
        axioms_ok &= abs(w1 - w1_1d(b, a).value) <= 1e-12
        axioms_ok &= w1_1d(a, a).value == 0.0
        axioms_ok &= w1 <= w1_1d(a, c).value + w1_1d(c, b).value + 1e-10
        axioms_ok &= w1 <= w2 + 1e-12
    ok = worst <= 1e-10 and quantile_gap <= 1e-12 and axioms_ok
    verdict_line(8, "metrics oracles", ok,
                 f"{count} brute-force instances, max gap={worst:.1e}, "
                 f"quantile-vs-assignment gap={quantile_gap:.1e}")
    assert ok


def test_criterion_09_second_moment_stability():
    model = default_instance()
    eps = 0.05
    assert eps <= epsilon_threshold(model)
    v_star = model.constants().v_star
    assert 0.0 < 1.0 - eps * v_star / 2.0 < 1.0
    n_steps = int(20.0 / eps)
    worst = 0.0
    for seed in range(8):
        cfg = EulerConfig(epsilon=eps, n_steps=n_steps, n_particles=64, seed=seed)
        rec = run_particle_system(model, cfg)
        q = n_steps // 4
        second = rec.m2[q:2 * q].mean()
        last = rec.m2[3 * q:].mean()
        worst = max(worst, last / second)
    ok = worst <= 2.0
    verdict_line(9, "second-moment stability", ok,
                 f"max last/second quartile ratio={worst:.3f} over 8 seeds")
    assert ok


def test_criterion_10_determinism_across_workers(tmp_path):
    raw = load_raw_config(CONFIG_DIR / "default.toml")
    raw["simulation"]["horizon"] = 1.0
    raw["experiment"] = {"n_values": [8, 16], "n_ref": 64, "replications": 4}
    blobs = {}
    for workers in (1, 4, 8):
        sc = build_scenario(raw, "poc_finite", workers=workers)
        res = exp_poc_finite(sc)
        out = tmp_path / f"workers{workers}"
        persist_experiment(sc, res, out, started=0.0)
        blobs[workers] = (out / "results.csv").read_bytes()
    ok = blobs[1] == blobs[4] == blobs[8]
    verdict_line(10, "determinism across workers", ok,
                 f"results.csv identical for 1/4/8 workers: {ok}")
    assert ok
