import math

import numpy as np
import pytest
from scipy.integrate import quad

from kspp.field import (
    EscapeError,
    FieldGrid,
    HistoryBuffer,
    apply_q,
    deposit_density,
    evaluate_h_direct,
    g_theta_closed_form,
    grad_h_at,
    theta_recursion_step,
    write_field_csv,
)
from kspp.model import ConfigurationError, CustomField, GaussianKernel, ModelParams

from conftest import make_instance


def make_grid(model, length=12.0, n_points=2048, margin=None, horizon=2.0):
    if margin is None:
        margin = 6.0 * math.sqrt(model.kernel.delta + horizon)
    return FieldGrid(model.params, model.kernel, model.h0, length, n_points, margin)


def phi(u, var):
    return (2.0 * math.pi * var) ** -0.5 * np.exp(-u * u / (2.0 * var))


# ---------------------------------------------------------------------- apply_q


def test_apply_q_identity_and_constants():
    v = np.sin(np.linspace(0, 2 * math.pi, 256, endpoint=False)) + 2.0
    np.testing.assert_array_equal(apply_q(v, 0.0, 1.0, spacing=0.05), v)
    const = np.full(256, 3.0)
    out = apply_q(const, 0.7, 1.2, spacing=0.05)
    np.testing.assert_allclose(out, 3.0 * math.exp(-1.2 * 0.7), rtol=1e-12)
    with pytest.raises(ValueError):
        apply_q(const, -0.1, 1.0, spacing=0.05)


def test_apply_q_semigroup_law(rng):
    spacing = 24.0 / 2048
    x = -12.0 + spacing * np.arange(2048)
    v = np.exp(-x ** 2) * (1.0 + 0.3 * np.cos(x))
    once = apply_q(apply_q(v, 0.3, 1.0, spacing), 0.5, 1.0, spacing)
    joint = apply_q(v, 0.8, 1.0, spacing)
    assert np.abs(once - joint).max() <= 1e-8


def test_apply_q_contraction(rng):
    spacing = 24.0 / 2048
    for _ in range(5):
        v = rng.standard_normal(2048)
        t = rng.uniform(0.0, 2.0)
        out = apply_q(v, t, 1.0, spacing)
        assert np.abs(out).max() <= math.exp(-t) * np.abs(v).max() + 1e-12


def test_apply_q_point_mass_matches_heat_kernel():
    n, length = 2048, 12.0
    spacing = 2 * length / n
    x = -length + spacing * np.arange(n)
    v = np.zeros(n)
    v[n // 2] = 1.0 / spacing  # discrete delta at x = 0
    out = apply_q(v, 1.0, 1.0, spacing)
    expect = math.exp(-1.0) * phi(x, 1.0)
    assert np.abs(out - expect).max() <= 1e-6


# ----------------------------------------------------------------- deposit


def test_deposit_single_particle_node_value(default_model):
    grid = make_grid(default_model)
    vals = deposit_density(np.array([[0.0]]), default_model.kernel, grid, method="exact")
    i0 = np.argmin(np.abs(grid.x))
    assert grid.x[i0] == 0.0
    assert vals[i0] == pytest.approx(0.3989422804014327, rel=1e-12)


def test_deposit_two_particles(default_model):
    grid = make_grid(default_model)
    vals = deposit_density(np.array([[-1.0], [1.0]]), default_model.kernel, grid, method="exact")
    i0 = np.argmin(np.abs(grid.x))
    assert vals[i0] == pytest.approx(0.24197072451914337, rel=1e-12)
    np.testing.assert_allclose(vals, vals[::-1].take(range(-1, len(vals) - 1)), atol=1e-12)


def test_deposit_mass_and_fft_agreement(default_model, rng):
    grid = make_grid(default_model)
    pos = rng.uniform(-1.5, 1.5, size=(40, 1))
    exact = deposit_density(pos, default_model.kernel, grid, method="exact")
    assert float(exact.sum() * grid.spacing) == pytest.approx(1.0, abs=1e-8)
    fft = deposit_density(pos, default_model.kernel, grid, method="fft")
    assert float(fft.sum() * grid.spacing) == pytest.approx(1.0, abs=1e-8)
    assert np.abs(fft - exact).max() <= 5e-5


def test_deposit_errors(default_model):
    grid = make_grid(default_model)
    with pytest.raises(ConfigurationError):
        deposit_density(np.empty((0, 1)), default_model.kernel, grid)
    with pytest.raises(EscapeError) as err:
        deposit_density(np.array([[0.1], [5.0]]), default_model.kernel, grid)
    assert err.value.particle == 1 and err.value.step == 0
    assert "particle 1" in str(err.value)


# ------------------------------------------------------------- theta recursion


def test_theta_zero_source_stays_zero(default_model):
    grid = make_grid(default_model)
    for _ in range(20):
        theta = theta_recursion_step(grid, np.zeros(grid.n_points), 0.01)
    assert np.all(theta == 0.0)


def test_theta_constant_source_matches_scalar_ode(default_model):
    # dTheta/dt = -alpha Theta + c has solution c (1 - e^{-alpha t}) / alpha
    grid = make_grid(default_model)
    c, eps, n = 0.7, 1e-2, 100
    for _ in range(n):
        theta_recursion_step(grid, np.full(grid.n_points, c), eps)
    expect = c * (1.0 - math.exp(-n * eps))
    assert np.abs(grid.theta_values - expect).max() <= 1e-4


def test_theta_recursion_matches_direct_evaluator(default_model, rng):
    eps, n = 0.01, 150
    grid = make_grid(default_model)
    pos = rng.uniform(-1.2, 1.2, size=(3, 1))
    hist = HistoryBuffer(step=eps)
    for _ in range(n):
        theta_recursion_step(grid, deposit_density(pos, default_model.kernel, grid, "exact"), eps)
        hist.append(pos)
    probes = np.linspace(-1.5, 1.5, 60)
    h_direct, grad_direct = evaluate_h_direct(hist, default_model.h0, default_model.params,
                                              default_model.kernel, probes)
    assert np.abs(grid.h_at(probes) - h_direct).max() <= 5e-3
    assert np.abs(grid.grad_h_at(probes) - grad_direct[:, 0]).max() <= 5e-3


# ------------------------------------------------------------ direct evaluator


def test_direct_evaluator_empty_history(default_model):
    hist = HistoryBuffer(step=0.01)
    h, grad = evaluate_h_direct(hist, default_model.h0, default_model.params,
                                default_model.kernel, 0.3)
    assert h == 0.0 and np.all(grad == 0.0)


def test_direct_evaluator_symmetry_and_oracle(default_model):
    # single particle frozen at the origin; oracle is adaptive quadrature of
    # int_0^t e^{-(t-s)} phi_{(t-s)+1}(x) ds
    eps, n = 0.01, 100
    hist = HistoryBuffer(step=eps)
    for _ in range(n):
        hist.append(np.array([[0.0]]))
    _, grad0 = evaluate_h_direct(hist, default_model.h0, default_model.params,
                                 default_model.kernel, 0.0)
    assert grad0 == 0.0
    h1, _ = evaluate_h_direct(hist, default_model.h0, default_model.params,
                              default_model.kernel, 1.0)
    t = n * eps
    oracle, _ = quad(lambda s: math.exp(-(t - s)) * phi(1.0, (t - s) + 1.0), 0.0, t,
                     epsabs=1e-13, epsrel=1e-13)
    assert h1 == pytest.approx(oracle, abs=1e-5)
    assert h1 == pytest.approx(0.14828178792406232, abs=1e-5)


def test_direct_evaluator_2d_radial_oracle():
    m = make_instance(dim=2)
    eps, n = 0.01, 60
    hist = HistoryBuffer(step=eps)
    for _ in range(n):
        hist.append(np.zeros((1, 2)))
    x = np.array([0.6, -0.8])  # radius 1
    h, grad = evaluate_h_direct(hist, m.h0, m.params, m.kernel, x)
    t = n * eps
    oracle, _ = quad(lambda s: math.exp(-(t - s)) / (2 * math.pi * ((t - s) + 1.0))
                     * math.exp(-1.0 / (2 * ((t - s) + 1.0))), 0.0, t,
                     epsabs=1e-13, epsrel=1e-13)
    assert h == pytest.approx(oracle, abs=1e-6)
    # gradient points inward along the radius
    assert grad @ x < 0
    assert abs(grad[0] / grad[1] - x[0] / x[1]) <= 1e-12


def test_direct_evaluator_3d_matches_radial_quadrature():
    m = make_instance(dim=3)
    eps, n = 0.02, 40
    hist = HistoryBuffer(step=eps)
    for _ in range(n):
        hist.append(np.zeros((2, 3)))  # two coincident frozen particles
    x = np.array([0.5, 0.5, math.sqrt(0.5)])  # radius 1
    h, grad = evaluate_h_direct(hist, m.h0, m.params, m.kernel, x)
    t = n * eps
    oracle, _ = quad(lambda s: math.exp(-(t - s))
                     * (2 * math.pi * ((t - s) + 1.0)) ** -1.5
                     * math.exp(-1.0 / (2 * ((t - s) + 1.0))), 0.0, t,
                     epsabs=1e-13, epsrel=1e-13)
    assert h == pytest.approx(oracle, abs=1e-6)
    assert grad.shape == (3,) and grad @ x < 0


def test_g_theta_2d_matches_finite_difference():
    m = make_instance(dim=2)
    rng = np.random.default_rng(8)
    pos = rng.uniform(-1, 1, size=(5, 2))
    y = np.array([0.3, -0.2])
    theta = 0.4

    def scalar_field(yy):
        var = theta + 1.0
        r2 = np.sum((pos - yy) ** 2, axis=-1)
        phi2 = (2 * math.pi * var) ** -1.0 * np.exp(-r2 / (2 * var))
        return math.exp(-theta) * phi2.mean()

    got = g_theta_closed_form(pos, y, theta, m.params, m.kernel)
    h = 1e-6
    for axis in range(2):
        e = np.zeros(2)
        e[axis] = h
        fd = (scalar_field(y + e) - scalar_field(y - e)) / (2 * h)
        assert got[axis] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_field_value_sup_bound(default_model, rng):
    # |h(t, .)| <= e^{-alpha t} sup|h0| + beta sup|g| / alpha + grid tolerance
    grid = make_grid(default_model)
    pos = rng.uniform(-1.0, 1.0, size=(6, 1))
    sup_g = 0.3989422804014327
    for k in range(150):
        theta_recursion_step(grid, deposit_density(pos, default_model.kernel, grid, "exact"),
                             0.01)
        bound = default_model.params.beta * sup_g / default_model.params.alpha
        assert np.abs(grid.h_values).max() <= bound + 1e-3


def test_direct_evaluator_rejects_custom_kernel(default_model):
    from kspp.model import CustomKernel
    k = CustomKernel(value=lambda x: np.zeros(x.shape[:-1]),
                     gradient=lambda x: np.zeros_like(x),
                     sup_g=1.0, sup_grad_g=1.0, sup_hess_g=1.0)
    hist = HistoryBuffer(step=0.01)
    hist.append(np.array([[0.0]]))
    with pytest.raises(ConfigurationError, match="gaussian"):
        evaluate_h_direct(hist, default_model.h0, default_model.params, k, 0.0)


def test_truncation_soundness(default_model, rng):
    eps = 0.05
    pos = rng.uniform(-1.0, 1.0, size=(4, 1))
    full = HistoryBuffer(step=eps)
    trunc = HistoryBuffer(step=eps, truncation_tol=1e-10)
    for _ in range(600):
        full.append(pos)
        trunc.append(pos)
        trunc.truncate(default_model.params.alpha)
    assert trunc.dropped > 0
    h_full, _ = evaluate_h_direct(full, default_model.h0, default_model.params,
                                  default_model.kernel, 0.3)
    h_trunc, _ = evaluate_h_direct(trunc, default_model.h0, default_model.params,
                                   default_model.kernel, 0.3)
    assert abs(h_trunc - h_full) <= 1e-8 * abs(h_full)


def test_history_buffer_rejects_nonfinite():
    hist = HistoryBuffer(step=0.01)
    with pytest.raises(ValueError):
        hist.append(np.array([[math.inf]]))


# ------------------------------------------------------------------- G closed form


def test_g_theta_symmetry_and_value(default_model):
    p, k = default_model.params, default_model.kernel
    assert g_theta_closed_form(np.array([[0.5]]), np.array([0.5]), 0.3, p, k) == 0.0
    val = g_theta_closed_form(np.array([[0.0]]), np.array([1.0]), 0.0, p, k)
    assert val[0] == pytest.approx(-0.24197072451914337, rel=1e-12)


def test_g_theta_norm_bound(default_model, rng):
    p, k = default_model.params, default_model.kernel
    sup_grad_g = 0.24197072451914337
    for _ in range(50):
        pos = rng.uniform(-3, 3, size=(int(rng.integers(1, 9)), 1))
        y = rng.uniform(-3, 3, size=1)
        theta = rng.uniform(0.0, 4.0)
        val = g_theta_closed_form(pos, y, theta, p, k)
        assert np.abs(val).max() <= math.exp(-theta) * sup_grad_g + 1e-12


# ---------------------------------------------------------------------- grad_h_at


def test_grad_constant_field_is_zero(default_model):
    grid = make_grid(default_model)
    for _ in range(10):
        theta_recursion_step(grid, np.full(grid.n_points, 1.3), 0.02)
    probes = np.linspace(-1.5, 1.5, 20)
    assert np.abs(grad_h_at(grid, probes)).max() == 0.0


def test_grad_antisymmetric_field_slope():
    # odd initial field x exp(-x^2/2): slope 1 at the origin
    h0 = CustomField(value=lambda x: x[..., 0] * np.exp(-x[..., 0] ** 2 / 2.0),
                     gradient=lambda x: (1 - x ** 2) * np.exp(-x ** 2 / 2.0),
                     sup_h0=math.exp(-0.5), sup_grad_h0=1.0, sup_hess_h0=3.0)
    m = make_instance(h0=h0)
    grid = make_grid(m)
    val = grad_h_at(grid, 0.0)
    assert val[0] == pytest.approx(1.0, abs=1e-6)


def test_grad_escape_error(default_model):
    grid = make_grid(default_model)
    with pytest.raises(EscapeError):
        grad_h_at(grid, 11.0)


def test_grid_validation(default_model):
    p, k, h0 = default_model.params, default_model.kernel, default_model.h0
    with pytest.raises(ConfigurationError):
        FieldGrid(p, k, h0, 12.0, 1000, 2.0)   # not a power of two
    with pytest.raises(ConfigurationError):
        FieldGrid(p, k, h0, 12.0, 1024, 15.0)  # margin exceeds length
    with pytest.raises(ConfigurationError):
        FieldGrid(ModelParams(1.0, 1.0, 1.0, dim=2), GaussianKernel(1.0, 2), h0,
                  12.0, 1024, 2.0)             # grid is 1-d only


def test_write_field_csv(tmp_path, default_model):
    grid = make_grid(default_model, n_points=256)
    theta_recursion_step(grid, deposit_density(np.array([[0.0]]), default_model.kernel, grid),
                         0.01)
    path = tmp_path / "field.csv"
    write_field_csv(grid, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# kspp-field-csv v1 step=1")
    assert lines[1] == "x,h,theta,grad_h"
    assert len(lines) == 2 + grid.n_points
