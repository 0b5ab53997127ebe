"""Continuous Lagrange finite element spaces and sparse assembly.

Degrees of freedom are Lagrange lattice nodes shared across cell
interfaces, which gives H1-conformity.  Homogeneous Dirichlet conditions
are imposed by symmetric elimination: coefficient vectors throughout the
toolkit range over the unconstrained dofs only, and constrained dofs are
identically zero.
"""

import functools

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .quadrature import simplex_rule


def _lattice_multi_indices(dim, p):
    """Barycentric lattice multi-indices (a_0..a_dim) summing to p."""
    out = []
    if dim == 1:
        for a1 in range(p + 1):
            out.append((p - a1, a1))
    else:
        for a1 in range(p + 1):
            for a2 in range(p + 1 - a1):
                out.append((p - a1 - a2, a1, a2))
    return out


def _monomial_exponents(dim, p):
    out = []
    if dim == 1:
        for a in range(p + 1):
            out.append((a,))
    else:
        for a in range(p + 1):
            for b in range(p + 1 - a):
                out.append((a, b))
    return out


def _eval_monomials(exps, points):
    points = np.atleast_2d(points)
    vals = np.ones((len(exps), len(points)))
    for j, e in enumerate(exps):
        for d, k in enumerate(e):
            if k:
                vals[j] *= points[:, d] ** k
    return vals


def _eval_monomial_grads(exps, points):
    points = np.atleast_2d(points)
    dim = points.shape[1]
    grads = np.zeros((len(exps), len(points), dim))
    for j, e in enumerate(exps):
        for d in range(dim):
            if e[d] == 0:
                continue
            g = np.full(len(points), float(e[d]))
            for dd, k in enumerate(e):
                kk = k - 1 if dd == d else k
                if kk:
                    g *= points[:, dd] ** kk
            grads[j, :, d] = g
    return grads


@functools.lru_cache(maxsize=None)
def reference_element(dim, p):
    """Lagrange reference element of degree p on the unit simplex.

    Returns (nodes, multi_indices, coeffs) where `coeffs` maps monomial
    coefficients of each nodal basis function (basis x monomial).
    """
    multis = _lattice_multi_indices(dim, p)
    nodes = np.array([[a / p for a in m[1:]] for m in multis])
    exps = _monomial_exponents(dim, p)
    V = _eval_monomials(exps, nodes).T  # (node, monomial)
    coeffs = np.linalg.inv(V).T  # (basis, monomial)
    return nodes, tuple(multis), coeffs


def _shape_values(dim, p, points):
    _, _, coeffs = reference_element(dim, p)
    exps = _monomial_exponents(dim, p)
    return coeffs @ _eval_monomials(exps, points)


def _shape_grads(dim, p, points):
    _, _, coeffs = reference_element(dim, p)
    exps = _monomial_exponents(dim, p)
    return np.einsum("bm,mqd->bqd", coeffs, _eval_monomial_grads(exps, points))


class ScalarSpace:
    """H1_0-conforming space of continuous piecewise P_p functions."""

    def __init__(self, mesh, degree):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.mesh = mesh
        self.degree = int(degree)
        self._number_dofs()
        self._table_cache = {}

    def _number_dofs(self):
        mesh, p = self.mesh, self.degree
        multis = _lattice_multi_indices(mesh.dim, p)
        n_loc = len(multis)
        key_to_id = {}
        keys = []
        cell_dofs = np.empty((mesh.n_cells, n_loc), dtype=int)
        face_index = {tuple(sorted(f)): i for i, f in enumerate(mesh.faces)}
        dof_on_boundary = []
        dof_points = []
        nodes_ref, _, _ = reference_element(mesh.dim, p)
        for k, cell in enumerate(mesh.cells):
            phys = mesh.map_to_physical(k, nodes_ref)
            for i, m in enumerate(multis):
                support = [j for j, a in enumerate(m) if a > 0]
                if len(support) == 1:
                    g = cell[support[0]]
                    key = ("v", int(g))
                    bdry = bool(mesh.boundary_vertex_flags[g])
                elif len(support) == 2 and mesh.dim == 2:
                    g0, g1 = cell[support[0]], cell[support[1]]
                    w1 = m[support[1]]
                    if g0 > g1:
                        g0, g1 = g1, g0
                        w1 = p - w1
                    key = ("e", int(g0), int(g1), int(w1))
                    fid = face_index.get((g0, g1))
                    bdry = fid is not None and bool(mesh.boundary_face_flags[fid])
                else:
                    key = ("c", k, i)
                    bdry = False
                gid = key_to_id.get(key)
                if gid is None:
                    gid = len(keys)
                    key_to_id[key] = gid
                    keys.append(key)
                    dof_on_boundary.append(bdry)
                    dof_points.append(phys[i])
                cell_dofs[k, i] = gid
        self.n_dofs = len(keys)
        self.cell_dofs = cell_dofs
        self.dirichlet_mask = np.array(dof_on_boundary, dtype=bool)
        self.free = ~self.dirichlet_mask
        self.free_index = np.flatnonzero(self.free)
        self.dim = int(self.free.sum())  # unconstrained dofs
        self.dof_points = np.array(dof_points)
        pos = np.full(self.n_dofs, -1, dtype=int)
        pos[self.free_index] = np.arange(self.dim)
        self._free_pos = pos

    # -- basis tables ---------------------------------------------------

    def tables(self, quad_degree):
        """Reference quadrature plus basis values/gradients, cached."""
        tab = self._table_cache.get(quad_degree)
        if tab is None:
            pts, wts = simplex_rule(self.mesh.dim, quad_degree)
            phi = _shape_values(self.mesh.dim, self.degree, pts)
            gref = _shape_grads(self.mesh.dim, self.degree, pts)
            tab = (pts, wts, phi, gref)
            self._table_cache[quad_degree] = tab
        return tab

    def default_quad_degree(self):
        return 2 * self.degree + 2

    # -- coefficient handling -------------------------------------------

    def full_coefficients(self, coef):
        """Scatter a free-dof vector to all dofs (zeros on Dirichlet)."""
        coef = np.asarray(coef, dtype=float)
        if coef.shape != (self.dim,):
            raise ValueError("coefficient vector has wrong length")
        full = np.zeros(self.n_dofs)
        full[self.free_index] = coef
        return full

    def cell_values(self, coef, quad_degree=None):
        """Values of the FE function at cell quadrature points, (nc, nq)."""
        quad_degree = quad_degree or self.default_quad_degree()
        _, _, phi, _ = self.tables(quad_degree)
        full = self.full_coefficients(coef)
        return full[self.cell_dofs] @ phi

    def cell_gradients(self, coef, quad_degree=None):
        """Physical gradients at cell quadrature points, (nc, nq, dim)."""
        quad_degree = quad_degree or self.default_quad_degree()
        _, _, _, gref = self.tables(quad_degree)
        full = self.full_coefficients(coef)
        local = full[self.cell_dofs]  # (nc, nloc)
        # physical gradient is J^{-T} grad_ref: contract grad_ref with the
        # rows of J^{-1}
        gphys = np.einsum("bqd,cde->cbqe", gref, self.mesh.cell_invjac)
        return np.einsum("cb,cbqe->cqe", local, gphys)

    def evaluate(self, coef, points):
        """Point values of the FE function at physical points."""
        cells, refs = self.mesh.locate(points)
        full = self.full_coefficients(coef)
        out = np.empty(len(cells))
        for i, (k, xi) in enumerate(zip(cells, refs)):
            phi = _shape_values(self.mesh.dim, self.degree, xi.reshape(1, -1))
            out[i] = full[self.cell_dofs[k]] @ phi[:, 0]
        return out

    def interpolate(self, func):
        """Free-dof vector of the nodal interpolant of `func(points)`."""
        vals = np.asarray(func(self.dof_points), dtype=float)
        return vals[self.free_index]


class SymmetricOperator:
    """Sparse symmetric matrix over the free dofs, factorized on demand."""

    def __init__(self, mat):
        mat = sp.csr_matrix(mat)
        asym = abs(mat - mat.T).max()
        scale = abs(mat).max() or 1.0
        if asym > 1e-13 * scale:
            raise ValueError("operator is not symmetric")
        self.mat = mat
        self.dim = mat.shape[0]
        self._factor = None

    def factor(self):
        if self._factor is None:
            try:
                self._factor = spla.splu(sp.csc_matrix(self.mat),
                                         permc_spec="MMD_AT_PLUS_A",
                                         options={"SymmetricMode": True})
            except RuntimeError as exc:
                raise SingularOperatorError(str(exc)) from exc
        return self._factor

    def apply(self, x):
        return self.mat @ x

    def solve(self, rhs):
        return solve_spd(self, rhs)


class SingularOperatorError(RuntimeError):
    """Factorization of a supposedly SPD operator failed."""


def solve_spd(op, rhs):
    """Direct solve with an algebraic residual check at 1e-12 relative."""
    rhs = np.asarray(rhs, dtype=float)
    x = op.factor().solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SingularOperatorError("factorization produced non-finite values")
    nrhs = np.linalg.norm(rhs)
    if nrhs > 0:
        # normwise backward error; |rhs| alone under-normalizes when the
        # load is nearly orthogonal to the stiff directions
        norm_a = getattr(op, "_norm_est", None)
        if norm_a is None:
            norm_a = spla.norm(op.mat, np.inf)
            op._norm_est = norm_a

        def backward_error(y):
            denom = nrhs + norm_a * np.linalg.norm(y)
            return np.linalg.norm(op.mat @ y - rhs) / denom

        res = backward_error(x)
        if res > 1e-12:
            # iterative refinement with the existing factor covers
            # ill-conditioned fine-mesh operators
            for _ in range(5):
                x = x + op.factor().solve(rhs - op.mat @ x)
                res = backward_error(x)
                if res <= 1e-12:
                    break
            else:
                raise SingularOperatorError(
                    f"direct solve residual {res:.2e} exceeds 1e-12")
    return x


def assemble(space, kind, eliminate=True):
    """Assemble the mass or stiffness form over `space`.

    With ``eliminate=False`` the full (constrained + unconstrained)
    matrix is returned as a raw csr matrix, which the invariant tests
    use; the default returns a `SymmetricOperator` on the free dofs.
    """
    if kind not in ("mass", "stiffness"):
        raise ValueError(f"unknown form kind {kind!r}")
    mesh = space.mesh
    pts, wts, phi, gref = space.tables(space.default_quad_degree())
    nloc = phi.shape[0]
    blocks = np.empty((mesh.n_cells, nloc, nloc))
    if kind == "mass":
        local = np.einsum("aq,bq,q->ab", phi, phi, wts)
        blocks[:] = local[None, :, :] * mesh.cell_detjac[:, None, None]
    else:
        gphys = np.einsum("bqd,cde->cbqe", gref, mesh.cell_invjac)
        blocks = np.einsum("caqe,cbqe,q,c->cab", gphys, gphys, wts,
                           mesh.cell_detjac)
    rows = np.repeat(space.cell_dofs, nloc, axis=1).ravel()
    cols = np.tile(space.cell_dofs, (1, nloc)).ravel()
    mat = sp.coo_matrix((blocks.ravel(), (rows, cols)),
                        shape=(space.n_dofs, space.n_dofs)).tocsr()
    if not eliminate:
        return mat
    free = space.free_index
    return SymmetricOperator(mat[free][:, free])


def load_vector(space, func, quad_degree=None):
    """Free-dof load vector of (func, phi)_Omega for a callable func."""
    quad_degree = quad_degree or space.default_quad_degree()
    pts, wts, phi, _ = space.tables(quad_degree)
    out = np.zeros(space.n_dofs)
    for k in range(space.mesh.n_cells):
        xq = space.mesh.map_to_physical(k, pts)
        fq = np.asarray(func(xq), dtype=float)
        out[space.cell_dofs[k]] += space.mesh.cell_detjac[k] * (phi @ (wts * fq))
    return out[space.free_index]


def l2_projection(space, func, mass=None, quad_degree=None):
    """L2-orthogonal projection of a callable onto the space."""
    mass = mass or assemble(space, "mass")
    return solve_spd(mass, load_vector(space, func, quad_degree=quad_degree))


def prolongation(coarse, fine):
    """Sparse interpolation matrix from coarse to nested fine free dofs.

    Exact for nested Lagrange spaces; raises if a fine node falls
    outside the coarse mesh.
    """
    if coarse.mesh.dim != fine.mesh.dim:
        raise ValueError("spaces live on meshes of different dimension")
    try:
        cells, refs = coarse.mesh.locate(fine.dof_points[fine.free_index])
    except ValueError as exc:
        raise ValueError("spaces are not nested") from exc
    rows, cols, vals = [], [], []
    for i, (k, xi) in enumerate(zip(cells, refs)):
        phi = _shape_values(coarse.mesh.dim, coarse.degree,
                            xi.reshape(1, -1))[:, 0]
        for loc, g in enumerate(coarse.cell_dofs[k]):
            fp = coarse._free_pos[g]
            if fp >= 0 and abs(phi[loc]) > 1e-14:
                rows.append(i)
                cols.append(fp)
                vals.append(phi[loc])
    return sp.coo_matrix((vals, (rows, cols)),
                         shape=(fine.dim, coarse.dim)).tocsr()


def estimate_h1_stability_constant(space, lift_space, tol=1e-8, max_iter=500):
    """Largest ratio |grad Pi_h v| / |grad v| over the lift space.

    Computed by power iteration on the generalized symmetric
    eigenproblem; the probe sup over the finite lift space is a lower
    estimate of the true stability constant.
    """
    P = prolongation(space, lift_space)
    if P.shape == (space.dim, space.dim):
        # lift equals trial: the projection is the identity
        if abs(P - sp.identity(space.dim)).max() < 1e-12:
            return 1.0
    M_h = assemble(space, "mass")
    A_h = assemble(space, "stiffness")
    M_H = assemble(lift_space, "mass")
    A_H = assemble(lift_space, "stiffness")

    # Rayleigh quotient R(y) = x^T A_h x / y^T A_H y with x = M_h^{-1} P^T M_H y,
    # so the numerator operator is N = (M_H P M_h^{-1}) A_h (M_h^{-1} P^T M_H).
    def numerator_op(y):
        x = solve_spd(M_h, P.T @ (M_H.apply(y)))
        return M_H.apply(P @ solve_spd(M_h, A_h.apply(x)))

    rng = np.random.default_rng(0)
    y = rng.standard_normal(lift_space.dim)
    lam = 0.0
    for _ in range(max_iter):
        z = numerator_op(y)
        y_new = solve_spd(A_H, z)
        denom = y_new @ (A_H.apply(y_new))
        y_new /= np.sqrt(denom)
        lam_new = y_new @ numerator_op(y_new)
        if lam > 0 and abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            break
        lam = lam_new
        y = y_new
    return float(np.sqrt(max(lam, 0.0)))
