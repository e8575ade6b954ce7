"""Particle-system simulator and verification toolkit for regularized chemotaxis models."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    AssumptionReport,
    ConfigurationError,
    CustomField,
    CustomKernel,
    CustomPotential,
    GaussianBumpField,
    GaussianInit,
    GaussianKernel,
    ModelInstance,
    ModelParams,
    PointMassInit,
    QuadraticPotential,
    TheoreticalConstants,
    UniformInit,
    ZeroField,
    check_assumption_a,
    compute_constants,
    convexity_modulus,
    default_instance,
    field_gradient_bound,
    kernel_sup_norms,
)
