import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gammaflow import fields as fl
from gammaflow import flows as fw
from gammaflow import functionals as fn
from gammaflow import minimality as mn


def sin_pi(x):
    return np.sin(np.pi * x[..., 0])


def heat(N=128, steps=50, T=0.05, **kw):
    g = fl.Grid(1, (N,), ((0.0, 1.0),), steps, T)
    return g, fw.solve(fw.filtration_problem(g, fw.constant(1.0), sin_pi, **kw))


def exact_heat(g):
    u = np.exp(-np.pi**2 * g.times())[:, None] * np.sin(np.pi * g.axes()[0])[None]
    u[:, [0, -1]] = 0.0
    return u


# -- filtration ---------------------------------------------------------------

def test_heat_benchmark_first_order_in_time():
    errs = []
    for steps in (25, 50, 100):
        g, sol = heat(1024, steps)
        errs.append(np.abs(sol.field.values[..., 0] - exact_heat(g)).max())
    ratios = np.array(errs[:-1]) / errs[1:]
    assert np.all(np.abs(ratios - 2.0) < 0.15)
    assert errs[-1] < 1e-3


def test_zero_data_is_a_fixed_point():
    g = fl.Grid(1, (32,), ((0.0, 1.0),), 5, 0.1)
    sol = fw.solve(fw.filtration_problem(g, fw.constant(2.0), lambda x: 0 * x[..., 0]))
    assert np.all(sol.field.values == 0.0)
    assert np.all(sol.phi_time_derivative.values == 0.0)


def test_heat_energy_dissipates_and_norms_reported():
    g, sol = heat()
    assert np.all(np.diff(sol.energy_trace) < 0)
    assert set(sol.estimate_norms) == {"V2", "dt_phi_L2"}
    assert all(np.isfinite(v) for v in sol.estimate_norms.values())


def test_periodic_heat_conserves_mass():
    g = fl.Grid(1, (128,), ((0.0, 1.0),), 20, 0.02)
    init = lambda x: 1.0 + 0.5 * np.cos(2 * np.pi * x[..., 0])
    sol = fw.solve(fw.filtration_problem(g, fw.constant(1.0), init, boundary=fl.PERIODIC))
    mass = [fl.spatial_integrate(sol.field.values[k, :, 0], g) for k in range(g.n_levels)]
    assert np.ptp(mass) < 1e-12


def test_heat_2d_separable_decay():
    g = fl.Grid(2, (48, 48), ((0.0, 1.0), (0.0, 1.0)), 20, 0.02)
    init = lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
    sol = fw.solve(fw.filtration_problem(g, fw.constant(1.0), init))
    peak = sol.field.values[-1, 24, 24, 0]
    assert peak == pytest.approx(math.exp(-2 * np.pi**2 * 0.02), rel=1e-2)


def test_power_phi_porous_medium_stays_nonnegative():
    g = fl.Grid(1, (64,), ((0.0, 1.0),), 10, 0.01)
    sol = fw.solve(fw.filtration_problem(g, fw.constant(1.0), sin_pi, phi=fw.PhiMap.power(2.0)))
    assert sol.field.values.min() >= -1e-10
    assert np.all(np.diff(sol.energy_trace) <= 1e-12)


def test_phi_maps():
    phi = fw.PhiMap.power(3.0)
    s = np.linspace(-2, 2, 11)
    assert np.allclose(phi.inverse(phi(s)), s)
    mono = fw.PhiMap.monotone(lambda s: s + s**3)
    assert np.allclose(mono(mono.inverse(np.array([0.5, 2.0, -3.0]))), [0.5, 2.0, -3.0], atol=1e-10)
    with pytest.raises(ValueError):
        fw.PhiMap.monotone(lambda s: -s)
    with pytest.raises(ValueError):
        fw.PhiMap.power(0.0)


@pytest.mark.parametrize("kw", [dict(substeps=0), dict(step_safety=2.0), dict(boundary="neumann")])
def test_problem_validation(kw):
    g = fl.Grid(1, (8,), ((0.0, 1.0),), 2, 0.1)
    with pytest.raises(ValueError):
        fw.filtration_problem(g, fw.constant(1.0), sin_pi, **kw)


def test_initial_shape_checked():
    g = fl.Grid(1, (8,), ((0.0, 1.0),), 2, 0.1)
    with pytest.raises(ValueError, match="shape"):
        fw.solve(fw.filtration_problem(g, fw.constant(1.0), np.zeros(5)))


# -- p-Laplace ----------------------------------------------------------------

def test_p_equal_two_matches_heat():
    g, sol = heat(256, 20, 0.02)
    sol_p = fw.solve(fw.p_laplace_problem(g, fw.constant(1.0), 2.0, sin_pi))
    assert np.abs(sol_p.field.values - sol.field.values).max() < 1e-8


def test_p_laplace_dissipates():
    g = fl.Grid(1, (128,), ((0.0, 1.0),), 20, 2e-3)
    for p in (1.5, 3.0):
        sol = fw.solve(fw.p_laplace_problem(g, fw.constant(1.0), p, sin_pi))
        assert np.all(np.diff(sol.energy_trace) <= 1e-12), p


# -- Allen-Cahn ---------------------------------------------------------------

@pytest.mark.parametrize("stepper", [fw.SEMI_IMPLICIT, fw.STRANG])
def test_kink_is_stationary(stepper):
    eps = 0.05
    g = fl.Grid(1, (1024,), ((-1.0, 1.0),), 20, 0.2)
    kink = lambda x: np.tanh(x[..., 0] / (math.sqrt(2) * eps))
    sol = fw.solve(fw.allen_cahn_problem(g, eps, kink, stepper=stepper))
    assert np.abs(sol.field.values[..., 0] - kink(g.coords())[None]).max() < 1e-3


def test_allen_cahn_maximum_principle_and_energy():
    eps = 0.05
    g = fl.Grid(1, (256,), ((-1.0, 1.0),), 50, 0.5)
    above = lambda x: 1.0 + 0.5 * (1.0 + np.sin(3.0 * np.pi * x[..., 0]))
    sol = fw.solve(fw.allen_cahn_problem(g, eps, above))
    assert sol.field.values.min() >= 1.0 - 1e-12
    assert np.all(np.diff(sol.energy_trace) <= 1e-12)


def test_edge_energy_exact_on_linear_fields():
    from gammaflow import discretization as disc
    g = fl.Grid(2, (16, 32), ((0.0, 2.0), (-1.0, 1.0)), 1, 1.0)
    x = g.coords()
    u = 3.0 * x[..., 0] - 2.0 * x[..., 1]
    assert disc.edge_dirichlet_energy(u, g) == pytest.approx(0.5 * 13.0 * 4.0, rel=1e-13)
    g1 = fl.Grid(1, (10,), ((0.0, 1.0),), 1, 1.0)
    assert disc.edge_dirichlet_energy(2.0 * g1.axes()[0], g1) == pytest.approx(2.0, rel=1e-13)


def test_allen_cahn_2d_energy_decreases():
    eps = 0.05
    g = fl.Grid(2, (64, 64), ((-1.0, 1.0), (-1.0, 1.0)), 10, 0.5)
    init = lambda x: np.tanh((0.5 - np.linalg.norm(x, axis=-1)) / (math.sqrt(2) * eps))
    for stepper in (fw.SEMI_IMPLICIT, fw.STRANG):
        sol = fw.solve(fw.allen_cahn_problem(g, eps, init, stepper=stepper, stabilization=1.0))
        assert np.all(np.diff(sol.energy_trace) <= 1e-10), stepper


def test_explicit_and_strang_agree_with_semi_implicit():
    eps = 0.1
    g = fl.Grid(1, (128,), ((-1.0, 1.0),), 10, 0.1)
    init = lambda x: 0.5 * np.sin(np.pi * x[..., 0])
    out = {s: fw.solve(fw.allen_cahn_problem(g, eps, init, boundary=fl.DIRICHLET_ZERO, stepper=s, substeps=200))
           for s in (fw.SEMI_IMPLICIT, fw.EXPLICIT, fw.STRANG)}
    ref = out[fw.SEMI_IMPLICIT].field.values
    for s in (fw.EXPLICIT, fw.STRANG):
        assert np.abs(out[s].field.values - ref).max() < 1e-3, s


def test_strang_rejected_for_filtration():
    g = fl.Grid(1, (16,), ((0.0, 1.0),), 2, 0.1)
    with pytest.raises(ValueError):
        fw.solve(fw.filtration_problem(g, fw.constant(1.0), sin_pi, stepper=fw.STRANG))


# -- residuals, fronts, checkpoints ------------------------------------------

def test_exact_heat_solution_has_small_weak_residual():
    g = fl.Grid(1, (512,), ((0.0, 1.0),), 400, 0.1)
    u = fl.SpaceTimeField(g, exact_heat(g)[..., None], fl.DIRICHLET_ZERO)
    sol = fw.FlowSolution.from_field(u)
    spec = fn.make_filtration(fw.constant(1.0))
    bank = mn.generate_eta_bank(g, 1, 16, seed=0)
    r = fw.weak_residuals(sol, spec, fw.PhiMap.identity(), bank)
    assert r.shape == (16,)
    assert r.max() < 1e-3
    # half the solution solves the equation but not the initial condition
    wrong = fw.FlowSolution.from_field(fl.SpaceTimeField(g, 0.5 * exact_heat(g)[..., None]), u0=exact_heat(g)[0])
    assert fw.el_residual(wrong, spec, fw.PhiMap.identity(), bank) > 10 * r.max()


def test_residual_rejects_nonzero_terminal_values():
    g = fl.Grid(1, (16,), ((0.0, 1.0),), 4, 0.1)
    u = fl.SpaceTimeField.from_function(g, lambda x, t: 0 * x[..., 0])
    eta = fl.SpaceTimeField.from_function(g, lambda x, t: np.sin(np.pi * x[..., 0]))
    with pytest.raises(ValueError, match="final time"):
        fw.weak_residuals(fw.FlowSolution.from_field(u), fn.make_filtration(fw.constant(1.0)),
                          fw.PhiMap.identity(), [eta])


@settings(max_examples=20, deadline=None)
@given(st.floats(0.2, 0.8), st.floats(-0.1, 0.1), st.floats(-0.1, 0.1))
def test_front_radius_of_circle(R, cx, cy):
    g = fl.Grid(2, (256, 256), ((-1.0, 1.0), (-1.0, 1.0)), 1, 1.0)
    x = g.coords()
    level = R - np.hypot(x[..., 0] - cx, x[..., 1] - cy)
    assert fw.front_radius(level, g) == pytest.approx(R, rel=2e-3)


def test_front_radius_without_front():
    g = fl.Grid(2, (16, 16), ((-1.0, 1.0), (-1.0, 1.0)), 1, 1.0)
    assert math.isnan(fw.front_radius(np.ones(g.space_shape), g))


def test_checkpoint_roundtrip(tmp_path):
    g, sol = heat(32, 5, 0.01)
    paths = fw.save_solution(sol, tmp_path / "heat")
    assert all(p.exists() for p in paths)
    back = fw.load_solution(tmp_path / "heat")
    assert np.array_equal(back.field.values, sol.field.values)
    assert np.array_equal(back.phi_time_derivative.values, sol.phi_time_derivative.values)
    assert np.array_equal(back.energy_trace, sol.energy_trace)
    assert np.array_equal(back.u0, sol.u0)
    assert back.estimate_norms == pytest.approx(sol.estimate_norms)


def test_initial_convention_flag():
    # u0 = Phi(u(., 0)) by default, u(., 0) = u0 when the flag is off
    g = fl.Grid(1, (64,), ((0.0, 1.0),), 4, 0.01)
    phi = fw.PhiMap.power(3.0)
    a = fw.solve(fw.filtration_problem(g, fw.constant(1.0), sin_pi, phi=phi))
    b = fw.solve(fw.filtration_problem(g, fw.constant(1.0), sin_pi, phi=phi, initial_is_phi=False))
    s = np.sin(np.pi * g.axes()[0])[1:-1]
    assert np.allclose(a.field.values[0, 1:-1, 0], np.cbrt(s), atol=1e-10)
    assert np.allclose(b.field.values[0, 1:-1, 0], s)
    assert np.allclose(b.u0[1:-1, 0], s**3)
    assert a.metadata["initial_is_phi"] and not b.metadata["initial_is_phi"]
