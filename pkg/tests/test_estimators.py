import numpy as np
import pytest

from parest.equilibration import assemble_flux
from parest.estimators import (bound_report, estimator_report, flux_estimator,
                               inefficiency_study, jump_estimator,
                               oscillation)
from parest.mesh import build_interval_mesh
from parest.norms import make_lift_context, spacetime_norm
from parest.timestepping import (IntervalAffineFunction, ModalProblem,
                                 TimePartition, modal_solve, reconstruct)
from parest.verification import (manufactured, reference_for_discrete,
                                 solve_manufactured)


def test_jump_estimator_modal_closed_form():
    # one step, lam=1: u1 = 1/2, eta_J = sqrt(tau/3 * lam * u1^2)
    prob = ModalProblem(1.0, partition=TimePartition.uniform(1, 1.0))
    sol, _ = modal_solve(prob)
    eta, local = jump_estimator(sol)
    assert np.isclose(eta, np.sqrt(1.0 / 3.0) / 2.0)
    assert np.isclose(local.sum(), eta ** 2)


def test_jump_estimator_equals_x_norm_of_jump_function():
    """Dual route: eta_J is by definition |u_tau - U_tau|_X; rebuild
    that difference as an interval-affine function and take the norm."""
    prob = manufactured("fourier_1d", 1, 2.0)
    sol = solve_manufactured(prob, build_interval_mesh(8), 2, 5)
    eta, _ = jump_estimator(sol)
    part = sol.partition
    lefts = sol.node_values[1:] - sol.node_values[:-1]
    rights = np.zeros_like(lefts)
    diff = IntervalAffineFunction(sol.system, part, lefts, rights)
    assert np.isclose(spacetime_norm(diff, "X"), eta, rtol=1e-12)


def test_flux_estimator_variants_and_localization():
    prob = manufactured("fourier_1d", 1, 2.0)
    sol = solve_manufactured(prob, build_interval_mesh(8), 1, 4)
    flux = assemble_flux(sol)
    totals = {}
    for variant in ("affine", "constant", "average"):
        tot, local = flux_estimator(sol, flux, variant)
        assert local.shape == (4, 8)
        assert np.isclose(local.sum(), tot ** 2, rtol=1e-12)
        totals[variant] = tot
    with pytest.raises(ValueError):
        flux_estimator(sol, flux, "cubic")


def test_oscillation_x_bound_against_closed_form():
    """f = x(1-x) + 2t: the mean-value defect is 2(t - midpoint) per
    interval, so int_In |f-f_tau|^2_{L2} dx dt = tau^3/3 * |1|^2_{L2}."""
    prob = manufactured("polynomial_in_time")
    n_cells, n_steps = 8, 4
    sol = solve_manufactured(prob, build_interval_mesh(n_cells), 2, n_steps)
    tot, local = oscillation(prob.forcing, sol, "X_bound")
    tau = 1.0 / n_steps
    expected_sq = n_steps * (tau / (2 * np.pi)) * (tau ** 3 / 3.0)
    assert np.isclose(tot ** 2, expected_sq, rtol=1e-10)
    assert np.isclose(local.sum(), tot ** 2, rtol=1e-12)


def test_oscillation_vanishes_for_time_constant_source():
    # fourier_1d(1, pi^2) has identically zero forcing
    prob = manufactured("fourier_1d", 1, np.pi ** 2)
    sol = solve_manufactured(prob, build_interval_mesh(8), 2, 4)
    ctx = make_lift_context(sol.system)
    for kind in ("Y", "X_bound", "patch", "energy"):
        tot, _ = oscillation(prob.forcing, sol, kind, ctx)
        assert tot <= 1e-12


def test_patch_oscillation_table_shape():
    prob = manufactured("polynomial_in_time")
    sol = solve_manufactured(prob, build_interval_mesh(8), 1, 3)
    tot, table = oscillation(prob.forcing, sol, "patch")
    assert table.shape == (9, 3)  # (n_vertices, n_steps)
    assert np.isclose(table.sum(), tot ** 2)
    # boundary patches have empty interiors for P1: zero contribution
    assert table[0].sum() == 0.0 and table[-1].sum() == 0.0


def test_estimator_report_totals_and_defect():
    prob = manufactured("polynomial_in_time")
    sol = solve_manufactured(prob, build_interval_mesh(8), 1, 4)
    flux = assemble_flux(sol)
    ctx = make_lift_context(sol.system, refine=2)
    rep = estimator_report(sol, flux=flux, ctx=ctx, f=prob.forcing)
    for key in ("eta_J", "eta_F", "eta_F_prime", "eta_F_avg",
                "osc_X_bound", "osc_Y"):
        assert key in rep.totals
    assert rep.localization_defect() <= 1e-12
    assert rep.lift_refinement == 2


def test_bound_report_y_upper_and_equivalence():
    prob = manufactured("fourier_1d", 1, 2.0)
    sol = solve_manufactured(prob, build_interval_mesh(16), 2, 8)
    flux = assemble_flux(sol)
    ctx = make_lift_context(sol.system, refine=2)
    ref = reference_for_discrete(sol, 4, 8)
    out = bound_report(sol, flux, ref, "Y_upper_5_1", ctx)
    assert out["error"] <= out["estimator"] * 1.05
    out = bound_report(sol, flux, ref, "EY_5_2", ctx)
    assert 1.0 - 0.05 <= out["equivalence_ratio"] <= 3.0 + 0.05
    with pytest.raises(ValueError):
        bound_report(sol, flux, ref, "nonsense", ctx)


def test_bound_report_rejects_weak_reference():
    prob = manufactured("fourier_1d", 1, 2.0)
    sol = solve_manufactured(prob, build_interval_mesh(8), 1, 2)
    flux = assemble_flux(sol)
    ctx = make_lift_context(sol.system)
    ref = reference_for_discrete(sol, 2, 2)
    with pytest.raises(ValueError):
        bound_report(sol, flux, ref, "Y_upper_5_1", ctx)


def test_x_lower_requires_parabolic_scaling():
    prob = manufactured("fourier_1d", 1, 2.0)
    # patch diameter 1, tau = 1/64: h^2 = 1 >> 10 tau
    sol = solve_manufactured(prob, build_interval_mesh(2), 1, 64)
    flux = assemble_flux(sol)
    ctx = make_lift_context(sol.system)
    ref = reference_for_discrete(sol, 4, 4)
    with pytest.raises(ValueError):
        bound_report(sol, flux, ref, "X_lower_5_3", ctx)


def test_inefficiency_study_trends():
    rows = inefficiency_study([0.01, 1.0, 100.0])
    ratios = [r["ratio_ut_over_Ut"] for r in rows]
    assert ratios[0] > ratios[1] > ratios[2]
    # closed-form check at lam = 1: eta_J = sqrt(1/3)/2
    row = rows[1]
    assert np.isclose(row["eta_J"], np.sqrt(1.0 / 3.0) / 2.0)
    with pytest.raises(ValueError):
        inefficiency_study([-1.0])
