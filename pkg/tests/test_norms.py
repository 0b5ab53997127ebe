import numpy as np
import pytest

from parest.mesh import build_interval_mesh
from parest.norms import (ProfileMismatchError, backward_representer,
                          dual_norm, infsup_identity_residual,
                          make_lift_context, residual_dual_norm_Y,
                          spacetime_norm, ys_identity_residual)
from parest.spaces import ScalarSpace
from parest.timestepping import (DiscreteSystem, ModalProblem,
                                 SpaceTimeFunction, TimePartition,
                                 modal_solve, reconstruct)


def _random_affine(system, part, rng):
    vals = rng.standard_normal((part.n_steps + 1, system.dim))
    return SpaceTimeFunction(system, part, vals, "continuous_affine")


def test_modal_norms_closed_form():
    # v(t) = t on (0,1), one dof with M=1, A=lam
    lam = 2.0
    system = DiscreteSystem.modal(lam)
    part = TimePartition.uniform(1, 1.0)
    v = SpaceTimeFunction(system, part, np.array([[0.0], [1.0]]),
                          "continuous_affine")
    ctx = make_lift_context(system)
    # X: int lam t^2 = lam/3
    assert np.isclose(spacetime_norm(v, "X"), np.sqrt(lam / 3.0))
    # energy adds |v(1)|^2/2
    assert np.isclose(spacetime_norm(v, "energy"), np.sqrt(lam / 3.0 + 0.5))
    # Y adds the dual derivative term |v'|_{H^-1}^2 = 1/lam and |v(1)|^2
    assert np.isclose(spacetime_norm(v, "Y", ctx),
                      np.sqrt(lam / 3.0 + 1.0 / lam + 1.0))
    assert np.isclose(spacetime_norm(v, "Y_T", ctx),
                      np.sqrt(lam / 3.0 + 1.0 / lam))
    assert np.isclose(spacetime_norm(v, "Y_star", ctx),
                      np.sqrt(lam / 3.0 + 1.0 / lam + 1.0))


def test_y_star_time_reversal_invariance():
    system = DiscreteSystem.modal(1.5)
    part = TimePartition([0.0, 0.3, 1.0])
    rng = np.random.default_rng(8)
    vals = rng.standard_normal((3, 1))
    v = SpaceTimeFunction(system, part, vals, "continuous_affine")
    w = SpaceTimeFunction(system, part.reversed(), vals[::-1],
                          "continuous_affine")
    ctx = make_lift_context(system)
    assert np.isclose(spacetime_norm(v, "Y_star", ctx),
                      spacetime_norm(w, "Y_star", ctx))


def test_y_norm_requires_affine_profile_and_context():
    system = DiscreteSystem.modal(1.0)
    part = TimePartition.uniform(2, 1.0)
    v = SpaceTimeFunction(system, part, np.zeros((3, 1)),
                          "constant_left_continuous")
    with pytest.raises(ProfileMismatchError):
        spacetime_norm(v, "Y", make_lift_context(system))
    aff = SpaceTimeFunction(system, part, np.zeros((3, 1)),
                            "continuous_affine")
    with pytest.raises(ValueError):
        spacetime_norm(aff, "Y")


def test_identities_exact_with_trial_lift():
    space = ScalarSpace(build_interval_mesh(8), 2)
    system = DiscreteSystem.from_space(space)
    part = TimePartition.uniform(4, 1.0)
    ctx = make_lift_context(system)
    rng = np.random.default_rng(1)
    for _ in range(5):
        v = _random_affine(system, part, rng)
        assert infsup_identity_residual(v, ctx) <= 1e-12
        assert ys_identity_residual(v, ctx) <= 1e-12


def test_dual_norm_stationary_and_aggregated():
    system = DiscreteSystem.modal(4.0)
    ctx = make_lift_context(system)
    # |l|_{H^-1 surrogate}^2 = l A^{-1} l = l^2/4
    assert np.isclose(dual_norm(np.array([2.0]), ctx), 1.0)
    loads = np.array([[2.0], [4.0]])
    steps = [0.5, 0.5]
    assert np.isclose(dual_norm(loads, ctx, steps),
                      np.sqrt(0.5 * 1.0 + 0.5 * 4.0))


def test_residual_dual_norm_collapses_to_jump_surrogate():
    from parest.estimators import jump_estimator
    from parest.verification import manufactured, solve_manufactured
    prob = manufactured("fourier_1d", 1, 2.0)
    sol = solve_manufactured(prob, build_interval_mesh(8), 2, 4)
    U = reconstruct(sol, "continuous_affine")
    ctx = make_lift_context(sol.system)  # lift = trial
    surr = residual_dual_norm_Y(U, sol.rhs_cell, ctx)
    eta, _ = jump_estimator(sol)
    assert abs(surr - eta) / eta < 1e-12


def test_backward_representer_is_lower_bound():
    space = ScalarSpace(build_interval_mesh(8), 1)
    system = DiscreteSystem.from_space(space)
    part = TimePartition.uniform(5, 1.0)
    rng = np.random.default_rng(4)
    v = _random_affine(system, part, rng)
    ctx = make_lift_context(system)
    _, ratio = backward_representer(v, ctx)
    x_norm = spacetime_norm(v, "X")
    assert ratio <= x_norm * (1 + 1e-12)
    assert ratio >= 0.5 * x_norm  # sharp for these smooth discrete fields


def test_refined_lift_sharper_than_trial():
    # the dual-norm surrogate is monotone nondecreasing under lift
    # refinement (larger test space, larger sup)
    space = ScalarSpace(build_interval_mesh(8), 1)
    system = DiscreteSystem.from_space(space)
    part = TimePartition.uniform(3, 1.0)
    rng = np.random.default_rng(6)
    v = _random_affine(system, part, rng)
    y_coarse = spacetime_norm(v, "Y", make_lift_context(system))
    y_fine = spacetime_norm(v, "Y", make_lift_context(system, refine=4))
    assert y_fine >= y_coarse - 1e-14
