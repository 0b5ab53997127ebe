import numpy as np
import pytest

from parest.mesh import build_interval_mesh
from parest.spaces import ScalarSpace
from parest.timestepping import (CellFunction, DiscreteSystem, ModalProblem,
                                 SpaceTimeFunction, TimePartition,
                                 implicit_euler_run, modal_solve, reconstruct,
                                 temporal_interpolant, time_mean_rhs)


def test_partition_validation():
    with pytest.raises(ValueError):
        TimePartition([0.0])
    with pytest.raises(ValueError):
        TimePartition([0.5, 1.0])
    with pytest.raises(ValueError):
        TimePartition([0.0, 0.5, 0.5])
    part = TimePartition.uniform(4, 2.0)
    assert part.n_steps == 4
    assert np.allclose(part.steps, 0.5)
    assert part.interval_of(0.0) == 1
    assert part.interval_of(0.5) == 1
    assert part.interval_of(0.51) == 2
    assert part.interval_of(2.0) == 4


def test_partition_reversed():
    part = TimePartition([0.0, 0.25, 1.0])
    rev = part.reversed()
    assert np.allclose(rev.nodes, [0.0, 0.75, 1.0])


def test_modal_one_step_closed_form():
    # (1/tau + lam) u1 = u0/tau + f with tau=1, lam=1, f=1, u0=0 -> u1=1/2
    prob = ModalProblem(1.0, partition=TimePartition.uniform(1, 1.0))
    sol, exact = modal_solve(prob)
    assert np.isclose(sol.node_values[1, 0], 0.5)
    assert np.isclose(exact(1.0), 1.0 - np.exp(-1.0))


def test_modal_many_steps_against_recursion():
    lam, N = 3.0, 16
    prob = ModalProblem(lam, partition=TimePartition.uniform(N, 1.0))
    sol, _ = modal_solve(prob)
    tau = 1.0 / N
    u = 0.0
    for n in range(1, N + 1):
        u = (u / tau + 1.0) / (1.0 / tau + lam)
        assert np.isclose(sol.node_values[n, 0], u)


def test_cell_function_projection_exact_for_polynomials():
    space = ScalarSpace(build_interval_mesh(4), 2)
    f = lambda x: 1.0 + 2.0 * x[:, 0] + 3.0 * x[:, 0] ** 2
    g = CellFunction.project(space, f)
    pts = space.tables(space.default_quad_degree())[0]
    for c in range(space.mesh.n_cells):
        xq = space.mesh.map_to_physical(c, pts)
        phi = space.tables(space.default_quad_degree())[2]
        assert np.allclose(g.cell_coefs[c] @ phi, f(xq))


def test_time_mean_rhs_exact_for_affine_sources():
    space = ScalarSpace(build_interval_mesh(4), 1)
    part = TimePartition.uniform(3, 1.0)
    f = lambda x, t: (1.0 + 2.0 * t) * np.ones(len(x))
    rhs = time_mean_rhs(f, part, space)
    for n in range(3):
        mid = 0.5 * (part.nodes[n] + part.nodes[n + 1])
        expected = CellFunction.project(space, lambda x: f(x, mid))
        assert np.allclose(rhs[n].cell_coefs, expected.cell_coefs)


def test_reconstruction_profiles():
    system = DiscreteSystem.modal(1.0)
    part = TimePartition.uniform(2, 1.0)
    vals = np.array([[0.0], [1.0], [3.0]])
    sol_like = SpaceTimeFunction(system, part, vals, "constant_left_continuous")
    assert sol_like.at_time(0.0) == 0.0
    assert sol_like.at_time(0.3) == 1.0
    assert sol_like.at_time(0.5) == 1.0
    aff = SpaceTimeFunction(system, part, vals, "continuous_affine")
    assert np.isclose(aff.at_time(0.25), 0.5)
    assert np.isclose(aff.at_time(0.75), 2.0)
    avg = SpaceTimeFunction(system, part, vals, "average")
    assert np.isclose(avg.at_time(0.25), 0.75)
    left, right = aff.endpoints(2)
    assert np.isclose(left, 1.0) and np.isclose(right, 3.0)
    assert np.isclose(aff.time_derivative(2), 4.0)
    with pytest.raises(ValueError):
        sol_like.time_derivative(1)
    interp = temporal_interpolant(sol_like)
    assert interp.profile == "continuous_affine"
    assert np.allclose(interp.node_values, vals)


def test_implicit_euler_matches_direct_solve():
    space = ScalarSpace(build_interval_mesh(8), 1)
    system = DiscreteSystem.from_space(space)
    part = TimePartition.uniform(4, 1.0)
    rng = np.random.default_rng(2)
    rhs = [rng.standard_normal(system.dim) for _ in range(4)]
    u0 = rng.standard_normal(system.dim)
    sol = implicit_euler_run(system, part, rhs, u0)
    tau = 0.25
    M = system.mass.mat.toarray()
    A = system.stiffness.mat.toarray()
    u = u0.copy()
    for n in range(4):
        u = np.linalg.solve(M / tau + A, M @ u / tau + rhs[n])
        assert np.allclose(sol.node_values[n + 1], u, atol=1e-11)


def test_rhs_length_checked():
    system = DiscreteSystem.modal(1.0)
    part = TimePartition.uniform(3, 1.0)
    with pytest.raises(ValueError):
        implicit_euler_run(system, part, [np.ones(1)], np.zeros(1))
