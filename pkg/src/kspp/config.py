"""Config-file ingestion: TOML problem/experiment descriptions and manifest replay.

The model block uses top-level keys ``alpha, beta, chi, dim`` plus the
``kernel``, ``potential``, ``h0`` and ``mu0`` tables.  ``[simulation]`` sets
step size, horizon, ensemble size and grid overrides; ``[experiment]`` names
the experiment and its sweeps.  A previously written ``manifest.json`` can be
given in place of a TOML file; its embedded config echo is used, which is what
makes manifest replay byte-reproducible.
"""

from __future__ import annotations

import json
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

import numpy as np

from .experiments import ScenarioConfig
from .model import (
    ConfigurationError,
    GaussianBumpField,
    GaussianInit,
    GaussianKernel,
    ModelInstance,
    ModelParams,
    PointMassInit,
    QuadraticPotential,
    UniformInit,
    ZeroField,
)

__all__ = ["load_raw_config", "build_model", "build_scenario", "DEFAULT_SEED"]

DEFAULT_SEED = 101


def load_raw_config(path) -> dict:
    """Read a TOML config or extract the echo from a manifest.json."""
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    if p.suffix == ".json":
        with open(p) as f:
            data = json.load(f)
        if data.get("kind") == "kspp-manifest":
            cfg = data.get("config")
            if not cfg:
                raise ConfigurationError(f"{p} is a manifest without an embedded config")
            return cfg
        return data
    with open(p, "rb") as f:
        return tomllib.load(f)


def _table(cfg: dict, name: str) -> dict:
    value = cfg.get(name, {})
    if not isinstance(value, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    return value


def build_model(cfg: dict) -> ModelInstance:
    if "gamma" in cfg and cfg["gamma"] != 1:
        raise ConfigurationError(
            "gamma is fixed to 1 (the standing normalization); remove the key "
            "or rescale alpha, beta and the time step instead")
    dim = int(cfg.get("dim", 1))
    params = ModelParams(alpha=float(cfg.get("alpha", 1.0)),
                         beta=float(cfg.get("beta", 1.0)),
                         chi=float(cfg.get("chi", 1.0)),
                         dim=dim)

    kcfg = _table(cfg, "kernel")
    kind = kcfg.get("kind", "gaussian")
    if kind != "gaussian":
        raise ConfigurationError(
            f"config files support kernel.kind = 'gaussian' only (got {kind!r}); "
            "custom kernels are constructed through the API")
    kernel = GaussianKernel(delta=float(kcfg.get("delta", 1.0)), dim=dim)

    pcfg = _table(cfg, "potential")
    kind = pcfg.get("kind", "quadratic")
    if kind != "quadratic":
        raise ConfigurationError(
            f"config files support potential.kind = 'quadratic' only (got {kind!r})")
    if "matrix" in pcfg:
        potential = QuadraticPotential(np.asarray(pcfg["matrix"], dtype=float))
        if potential.dim != dim:
            raise ConfigurationError("potential.matrix does not match dim")
    else:
        potential = QuadraticPotential.isotropic(float(pcfg.get("a", 1.0)), dim)

    hcfg = _table(cfg, "h0")
    kind = hcfg.get("kind", "zero")
    if kind == "zero":
        h0 = ZeroField()
    elif kind == "gaussian_bump":
        h0 = GaussianBumpField(amplitude=float(hcfg.get("amplitude", 1.0)),
                               variance=float(hcfg.get("variance", 1.0)), dim=dim)
    else:
        raise ConfigurationError(f"unknown h0.kind {kind!r} (zero | gaussian_bump)")

    mcfg = _table(cfg, "mu0")
    kind = mcfg.get("kind", "gaussian")
    if kind == "point_mass":
        mu0 = PointMassInit(x0=mcfg.get("x0", 0.0), dim=dim)
    elif kind == "gaussian":
        mu0 = GaussianInit(mean=float(mcfg.get("mean", 0.0)),
                           variance=float(mcfg.get("variance", 0.25)), dim=dim)
    elif kind == "uniform":
        mu0 = UniformInit(low=float(mcfg.get("low", -1.0)),
                          high=float(mcfg.get("high", 1.0)), dim=dim)
    else:
        raise ConfigurationError(f"unknown mu0.kind {kind!r} (point_mass | gaussian | uniform)")

    return ModelInstance(params=params, kernel=kernel, potential=potential,
                         h0=h0, mu0=mu0)


def build_scenario(cfg: dict, experiment: str,
                   seed: int | None = None, workers: int = 1) -> ScenarioConfig:
    """Assemble a scenario from a raw config dict; CLI overrides win over the file."""
    model = build_model(cfg)
    sim = _table(cfg, "simulation")
    exp = _table(cfg, "experiment")
    if seed is None:
        seed = int(sim.get("seed", DEFAULT_SEED))
    raw = dict(cfg)
    raw.setdefault("simulation", {})
    raw["simulation"] = dict(raw["simulation"])
    raw["simulation"]["seed"] = seed

    def tup(key, default=()):
        return tuple(exp.get(key, default))

    return ScenarioConfig(
        experiment=experiment,
        model=model,
        seed=seed,
        epsilon=float(sim.get("epsilon", 0.01)),
        horizon=float(sim.get("horizon", 5.0)),
        n_particles=int(sim.get("n_particles", 128)),
        field_method=str(sim.get("field_method", "grid")),
        grid_length=sim.get("grid_length"),
        grid_points=sim.get("grid_points"),
        n_values=tuple(int(n) for n in tup("n_values")),
        n_ref=int(exp.get("n_ref", 0)),
        replications=int(exp.get("replications", 16)),
        epsilons=tuple(float(e) for e in tup("epsilons")),
        refine_levels=int(exp.get("refine_levels", 4)),
        thresholds=tuple(float(t) for t in tup("thresholds")),
        finite_time=float(exp.get("finite_time", 2.0)),
        workers=workers,
        raw=raw,
    )
