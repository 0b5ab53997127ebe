import numpy as np
import pytest
import scipy.sparse as sp

from parest.mesh import build_interval_mesh, build_structured_triangle_mesh
from parest.spaces import (ScalarSpace, SingularOperatorError,
                           SymmetricOperator, assemble, l2_projection,
                           load_vector, prolongation, solve_spd)


def test_p1_interval_stiffness_matches_tridiagonal():
    n = 5
    mesh = build_interval_mesh(n)
    space = ScalarSpace(mesh, 1)
    A = assemble(space, "stiffness").mat.toarray()
    h = 1.0 / n
    expected = (np.diag(2.0 * np.ones(n - 1))
                - np.diag(np.ones(n - 2), 1)
                - np.diag(np.ones(n - 2), -1)) / h
    assert np.allclose(A, expected)


def test_p1_interval_mass_matches_tridiagonal():
    n = 4
    mesh = build_interval_mesh(n)
    space = ScalarSpace(mesh, 1)
    M = assemble(space, "mass").mat.toarray()
    h = 1.0 / n
    expected = h * (np.diag(4.0 * np.ones(n - 1))
                    + np.diag(np.ones(n - 2), 1)
                    + np.diag(np.ones(n - 2), -1)) / 6.0
    assert np.allclose(M, expected)


def test_mass_total_measure():
    # sum over the full (unconstrained) mass matrix equals the domain area
    mesh = build_structured_triangle_mesh(3, 3)
    space = ScalarSpace(mesh, 2)
    M = assemble(space, "mass", eliminate=False)
    assert np.isclose(M.sum(), 1.0)


def test_gradient_of_linear_function_exact():
    # affine functions with nonzero boundary values: use the
    # full-coefficient tables directly to check the physical-gradient
    # contraction against a known constant gradient
    space = ScalarSpace(build_structured_triangle_mesh(3, 2,
                                                       (0.0, 1.5, 0.0, 1.0)), 2)
    f = lambda x: x[:, 0] + 0.5 * x[:, 1]
    full = f(space.dof_points)
    gref = space.tables(space.default_quad_degree())[3]
    gphys = np.einsum("bqd,cde->cbqe", gref, space.mesh.cell_invjac)
    grads = np.einsum("cb,cbqe->cqe", full[space.cell_dofs], gphys)
    assert np.allclose(grads[..., 0], 1.0)
    assert np.allclose(grads[..., 1], 0.5)
    # the constrained route agrees on functions vanishing on the boundary
    g = lambda x: (x[:, 0] * (1.5 - x[:, 0]) * x[:, 1] * (1.0 - x[:, 1]))
    coef = space.interpolate(g)
    direct = np.einsum("cb,cbqe->cqe",
                       space.full_coefficients(coef)[space.cell_dofs], gphys)
    assert np.allclose(space.cell_gradients(coef), direct)


def test_l2_projection_reproduces_space_functions():
    mesh = build_interval_mesh(8)
    space = ScalarSpace(mesh, 2)
    f = lambda x: np.sin(np.pi * x[:, 0])
    coef = l2_projection(space, f)
    x = np.linspace(0.05, 0.95, 17).reshape(-1, 1)
    # P2 projection of a smooth function on 8 cells: small point error
    assert np.max(np.abs(space.evaluate(coef, x) - f(x))) < 5e-4
    # projection is exact on members of the space
    g = lambda x: x[:, 0] * (1.0 - x[:, 0])
    coef = l2_projection(space, g)
    assert np.max(np.abs(space.evaluate(coef, x) - g(x))) < 1e-12


def test_load_vector_constant_one():
    mesh = build_interval_mesh(4)
    space = ScalarSpace(mesh, 1)
    b = load_vector(space, lambda x: np.ones(len(x)))
    # interior hat integrals are h each
    assert np.allclose(b, 0.25)


def test_poisson_2d_manufactured():
    mesh = build_structured_triangle_mesh(8, 8)
    space = ScalarSpace(mesh, 2)
    A = assemble(space, "stiffness")
    f = lambda x: 2 * np.pi ** 2 * np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    u = solve_spd(A, load_vector(space, f))
    x = np.array([[0.5, 0.5], [0.25, 0.75], [0.3, 0.3]])
    exact = np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
    assert np.max(np.abs(space.evaluate(u, x) - exact)) < 1e-3


def test_prolongation_exact_on_nested_grids():
    from parest.mesh import refine_mesh
    mesh = build_interval_mesh(4)
    coarse = ScalarSpace(mesh, 2)
    fine = ScalarSpace(refine_mesh(mesh, 2), 2)
    P = prolongation(coarse, fine)
    rng = np.random.default_rng(5)
    coef = rng.standard_normal(coarse.dim)
    x = np.linspace(0.01, 0.99, 23).reshape(-1, 1)
    assert np.allclose(fine.evaluate(P @ coef, x),
                       coarse.evaluate(coef, x), atol=1e-12)


def test_solve_spd_backward_error_and_singularity():
    rng = np.random.default_rng(0)
    B = rng.standard_normal((12, 12))
    op = SymmetricOperator(sp.csr_matrix(B @ B.T + 12 * np.eye(12)))
    b = rng.standard_normal(12)
    x = solve_spd(op, b)
    r = np.linalg.norm(op.apply(x) - b)
    scale = np.linalg.norm(b) + np.abs(op.mat.toarray()).sum(1).max() * np.linalg.norm(x)
    assert r / scale <= 1e-12
    singular = SymmetricOperator(sp.csr_matrix(np.zeros((3, 3))))
    with pytest.raises(SingularOperatorError):
        solve_spd(singular, np.ones(3))


def test_symmetric_operator_rejects_asymmetry():
    with pytest.raises(ValueError):
        SymmetricOperator(sp.csr_matrix(np.array([[1.0, 2.0], [0.0, 1.0]])))
