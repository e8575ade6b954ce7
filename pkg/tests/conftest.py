import numpy as np
import pytest

from kspp.model import (
    GaussianInit,
    GaussianKernel,
    ModelInstance,
    ModelParams,
    QuadraticPotential,
    ZeroField,
    default_instance,
)


@pytest.fixture(scope="session")
def default_model() -> ModelInstance:
    return default_instance()


def make_instance(alpha=1.0, beta=1.0, chi=1.0, a=1.0, delta=1.0, dim=1,
                  h0=None, mu0=None) -> ModelInstance:
    return ModelInstance(
        params=ModelParams(alpha=alpha, beta=beta, chi=chi, dim=dim),
        kernel=GaussianKernel(delta=delta, dim=dim),
        potential=QuadraticPotential.isotropic(a, dim=dim),
        h0=h0 if h0 is not None else ZeroField(),
        mu0=mu0 if mu0 is not None else GaussianInit(mean=0.0, variance=0.25, dim=dim),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
