import numpy as np
import pytest

from parest.equilibration import (EquilibratedFlux, PatchSolution,
                                  RTNPatchSpace, assemble_flux,
                                  build_patch_spaces, equilibration_residual,
                                  patch_source, patch_target, rtn_dimension,
                                  solve_patch, solve_patch_nullspace)
from parest.mesh import (build_interval_mesh, build_structured_triangle_mesh,
                         vertex_patches)
from parest.verification import manufactured, solve_manufactured


def test_rtn_dimension_formulas():
    # 1D RTN_k = P_{k+1}: k+2 coefficients
    assert rtn_dimension(1, 0) == 2
    assert rtn_dimension(1, 1) == 3
    # 2D: dim P_k(R^2) * 2 + k+1 homogeneous scalar modes
    assert rtn_dimension(2, 0) == 3
    assert rtn_dimension(2, 1) == 8
    assert rtn_dimension(2, 2) == 15


@pytest.mark.parametrize("dim,degree", [(1, 1), (1, 2), (2, 1), (2, 2)])
def test_patch_solver_against_nullspace_oracle(dim, degree):
    """The sparse saddle-point route and the dense null-space quadratic
    program must agree on interior and boundary patches."""
    prob = (manufactured("fourier_1d", 1, 2.0) if dim == 1
            else manufactured("fourier_2d", 1, 1, 2.0))
    mesh = (build_interval_mesh(8) if dim == 1
            else build_structured_triangle_mesh(4, 4))
    sol = solve_manufactured(prob, mesh, degree, 3)
    patches = vertex_patches(mesh)
    spaces = build_patch_spaces(mesh, degree + 1)
    tested_interior = tested_boundary = False
    for patch, pspace in zip(patches, spaces):
        if patch.is_interior and not tested_interior:
            tested_interior = True
        elif (not patch.is_interior) and not tested_boundary:
            tested_boundary = True
        else:
            continue
        for n in (1, 3):
            g = patch_source(sol, pspace, n)
            tgt = patch_target(sol, pspace, n)
            a = solve_patch(pspace, g, tgt)
            b = solve_patch_nullspace(pspace, g, tgt)
            scale = max(np.abs(a.coefs).max(), 1e-30)
            assert np.abs(a.coefs - b).max() <= 1e-9 * scale
    assert tested_interior and tested_boundary


def test_flux_equilibration_residual_small():
    prob = manufactured("fourier_1d", 2, 5.0)
    sol = solve_manufactured(prob, build_interval_mesh(8), 1, 4)
    flux = assemble_flux(sol)
    assert equilibration_residual(flux, sol) <= 1e-11
    assert flux.normal_jump_max() <= 1e-11


def test_flux_equilibration_residual_small_2d():
    prob = manufactured("fourier_2d", 1, 1, 2.0)
    sol = solve_manufactured(prob, build_structured_triangle_mesh(4, 4), 1, 4)
    flux = assemble_flux(sol)
    assert equilibration_residual(flux, sol) <= 1e-11
    assert flux.normal_jump_max() <= 1e-11


def test_patch_source_compatibility():
    """Interior-patch sources carry zero mean by Galerkin orthogonality
    against the hat function."""
    prob = manufactured("fourier_1d", 1, 2.0)
    mesh = build_interval_mesh(8)
    sol = solve_manufactured(prob, mesh, 2, 3)
    spaces = build_patch_spaces(mesh, 3)
    for patch, pspace in zip(vertex_patches(mesh), spaces):
        if not patch.is_interior:
            continue
        g = patch_source(sol, pspace, 1)  # raises on incompatibility
        total, mass_l1 = pspace.source_integral(g)
        assert abs(total) <= 1e-11 * max(mass_l1, 1.0)


def test_flux_assembly_deterministic():
    prob = manufactured("fourier_1d", 1, 2.0)
    sol = solve_manufactured(prob, build_interval_mesh(8), 1, 3)
    f1 = assemble_flux(sol)
    f2 = assemble_flux(sol)
    assert np.array_equal(f1.coefs, f2.coefs)


def test_flux_degree_default_and_override():
    prob = manufactured("fourier_1d", 1, 2.0)
    sol = solve_manufactured(prob, build_interval_mesh(8), 1, 2)
    assert assemble_flux(sol).degree == 2
    assert assemble_flux(sol, degree=3).degree == 3
