"""Vertex-patch equilibrated flux reconstruction.

For each mesh vertex a and time interval n a small constrained
least-squares problem is solved on the patch of cells around a: minimize
the distance of an H(div)-conforming Raviart-Thomas-Nedelec field to
-psi_a grad u, subject to a divergence constraint built from the
hat-function-weighted residual of the scheme.  The patch fluxes sum to a
global flux whose divergence reproduces the discrete source exactly,
which is the backbone of the guaranteed upper bounds.

Per-cell flux fields are RTN_k(K) = P_k(K; R^d) + x P_k(K), stored in
monomial coordinates centered and scaled per cell.  In one dimension
this space is the scalar P_{k+1}(K) and H(div) conformity is plain
continuity of point values.
"""

import numpy as np
import scipy.linalg as sla

from .quadrature import gauss_interval, simplex_rule
from .spaces import (_monomial_exponents, _eval_monomials,
                     _eval_monomial_grads, _shape_values, _shape_grads)


class CompatibilityError(RuntimeError):
    """Interior-patch source with a nonzero mean."""


class PatchSolveError(RuntimeError):
    """The patch saddle system failed its optimality or constraint check."""


def rtn_dimension(dim, degree):
    n_scalar = len(_monomial_exponents(dim, degree))
    n_homog = sum(1 for e in _monomial_exponents(dim, degree)
                  if sum(e) == degree)
    return dim * n_scalar + n_homog


def _rtn_tables(dim, degree, s_points):
    """Basis values (nb, nq, dim) and scaled divergences (nb, nq) of
    RTN_degree at scaled points; physical divergence is divs / h."""
    exps = _monomial_exponents(dim, degree)
    mono = _eval_monomials(exps, s_points)
    mgrad = _eval_monomial_grads(exps, s_points)
    nq = len(np.atleast_2d(s_points))
    nb = rtn_dimension(dim, degree)
    vals = np.zeros((nb, nq, dim))
    divs = np.zeros((nb, nq))
    b = 0
    for j in range(len(exps)):
        for i in range(dim):
            vals[b, :, i] = mono[j]
            divs[b] = mgrad[j, :, i]
            b += 1
    s = np.atleast_2d(s_points)
    for j, e in enumerate(exps):
        if sum(e) != degree:
            continue
        for i in range(dim):
            vals[b, :, i] = s[:, i] * mono[j]
        divs[b] = (dim + degree) * mono[j]
        b += 1
    return vals, divs


def _cell_frames(mesh, cells):
    """Per-cell centroid and diameter used to scale the monomial bases."""
    centers = mesh.vertices[mesh.cells[cells]].mean(axis=1)
    scales = mesh.cell_diameters[cells]
    return centers, scales


def _hat_tables(mesh, cell, vertex, ref_points):
    """Values and constant physical gradient of the hat function of
    `vertex` restricted to `cell`, at reference points."""
    local = int(np.flatnonzero(mesh.cells[cell] == vertex)[0])
    pts = np.atleast_2d(ref_points)
    if local == 0:
        vals = 1.0 - pts.sum(axis=1)
        gref = -np.ones(mesh.dim)
    else:
        vals = pts[:, local - 1].copy()
        gref = np.zeros(mesh.dim)
        gref[local - 1] = 1.0
    grad = mesh.cell_invjac[cell].T @ gref
    return vals, grad


class PatchPressureSpace:
    """Discontinuous per-cell P_degree test space of the divergence
    constraint; interior vertices carry the zero-mean gauge."""

    def __init__(self, mesh, patch, degree):
        self.degree = int(degree)
        self.zero_mean = patch.is_interior
        self.exponents = _monomial_exponents(mesh.dim, self.degree)
        self.n_local = len(self.exponents)


class RTNPatchSpace:
    """Flux search space of one vertex patch.

    Holds quadrature tables, the patch mass matrix, and the linear
    constraints (normal-trace continuity and the boundary mask); the
    divergence rows complete the time-independent saddle matrix, which
    is factorized once and reused for every time interval.
    """

    def __init__(self, mesh, patch, degree):
        self.mesh = mesh
        self.patch = patch
        self.degree = k = int(degree)
        self.cells = list(patch.cells)
        self.dim = dim = mesh.dim
        self.nb = rtn_dimension(dim, k)
        self.n_vars = self.nb * len(self.cells)
        self.pressure = PatchPressureSpace(mesh, patch, k)
        self.centers, self.scales = _cell_frames(mesh, self.cells)

        self.ref_points, ref_weights = simplex_rule(dim, 2 * k + 2)
        self.quad_weights = []   # physical weights per cell, (nq,)
        self.phys_points = []
        self.basis_vals = []     # (nb, nq, dim)
        self.basis_divs = []     # (nb, nq), physical
        self.pressure_vals = []  # (npk, nq)
        for i, c in enumerate(self.cells):
            xq = mesh.map_to_physical(c, self.ref_points)
            sq = (xq - self.centers[i]) / self.scales[i]
            vals, divs = _rtn_tables(dim, k, sq)
            self.phys_points.append(xq)
            self.quad_weights.append(ref_weights * mesh.cell_detjac[c])
            self.basis_vals.append(vals)
            self.basis_divs.append(divs / self.scales[i])
            self.pressure_vals.append(
                _eval_monomials(self.pressure.exponents, sq))

        self._build_mass()
        self._build_trace_rows()
        self._build_divergence_rows()
        self._kkt_factor = None

    # -- objective -------------------------------------------------------

    def _build_mass(self):
        W = np.zeros((self.n_vars, self.n_vars))
        for i in range(len(self.cells)):
            blk = np.einsum("aqd,bqd,q->ab", self.basis_vals[i],
                            self.basis_vals[i], self.quad_weights[i])
            o = i * self.nb
            W[o:o + self.nb, o:o + self.nb] = blk
        self.mass = W

    # -- constraints -----------------------------------------------------

    def _face_trace_row(self, local_cell, face_id):
        """Moments of the normal trace of the local-cell basis on the
        face against 0..degree monomials of the arc parameter."""
        mesh, k = self.mesh, self.degree
        verts = mesh.vertices[mesh.faces[face_id]]
        if mesh.dim == 1:
            x = verts.reshape(1, 1)
            normal = np.array([1.0])
            tq = np.zeros(1)
            tw = np.ones(1)
            pts = x
            n_moments = 1
        else:
            va, vb = verts  # ascending global index by construction
            tang = vb - va
            length = float(np.linalg.norm(tang))
            normal = np.array([tang[1], -tang[0]]) / length
            tq, tw = gauss_interval(2 * k + 2)
            pts = va + np.outer(tq, tang)
            tw = tw * length
            n_moments = k + 1
        i = self.cells.index(local_cell)
        sq = (pts - self.centers[i]) / self.scales[i]
        vals, _ = _rtn_tables(mesh.dim, k, sq)
        vn = vals @ normal  # (nb, nqf)
        rows = np.zeros((n_moments, self.n_vars))
        o = i * self.nb
        for m in range(n_moments):
            rows[m, o:o + self.nb] = vn @ (tw * tq ** m)
        return rows

    def _build_trace_rows(self):
        mesh = self.mesh
        patch = self.patch
        seen = {}
        for c in self.cells:
            for f in mesh.cell_faces[c]:
                seen.setdefault(f, []).append(c)
        rows = []
        self.constrained_faces = []
        self.interior_faces = []
        for f in sorted(seen):
            owners = seen[f]
            if len(owners) == 2:
                # spoke face: continuity of the normal trace
                r = (self._face_trace_row(owners[0], f)
                     - self._face_trace_row(owners[1], f))
                self.interior_faces.append(f)
            else:
                on_domain_bdry = bool(mesh.boundary_face_flags[f])
                if not patch.is_interior and on_domain_bdry:
                    continue  # flux may exit through the Dirichlet boundary
                r = self._face_trace_row(owners[0], f)
                self.constrained_faces.append(f)
            rows.append(r)
        self.trace_rows = (np.vstack(rows) if rows
                           else np.zeros((0, self.n_vars)))

    def _build_divergence_rows(self):
        npk = self.pressure.n_local
        B = np.zeros((npk * len(self.cells), self.n_vars))
        mean_row = np.zeros(npk * len(self.cells))
        for i in range(len(self.cells)):
            o = i * self.nb
            ro = i * npk
            B[ro:ro + npk, o:o + self.nb] = np.einsum(
                "pq,bq,q->pb", self.pressure_vals[i], self.basis_divs[i],
                self.quad_weights[i])
            # integral of each pressure basis function (the gauge vector)
            mean_row[ro:ro + npk] = self.pressure_vals[i] @ self.quad_weights[i]
        self.div_rows = B
        self.pressure_gauge = mean_row

    # -- saddle system ---------------------------------------------------

    def kkt_factor(self):
        """LU factor of the bordered symmetric saddle matrix
        [[W, T^t, D^t, 0], [T, 0, 0, 0], [D, 0, 0, m], [0, 0, m^t, 0]]
        with T the trace rows, D the divergence rows, and m the
        zero-mean gauge (interior vertices only)."""
        if self._kkt_factor is None:
            nv = self.n_vars
            nt = self.trace_rows.shape[0]
            nd = self.div_rows.shape[0]
            ng = 1 if self.pressure.zero_mean else 0
            n = nv + nt + nd + ng
            K = np.zeros((n, n))
            K[:nv, :nv] = self.mass
            K[nv:nv + nt, :nv] = self.trace_rows
            K[:nv, nv:nv + nt] = self.trace_rows.T
            K[nv + nt:nv + nt + nd, :nv] = self.div_rows
            K[:nv, nv + nt:nv + nt + nd] = self.div_rows.T
            if ng:
                K[nv + nt:nv + nt + nd, -1] = self.pressure_gauge
                K[-1, nv + nt:nv + nt + nd] = self.pressure_gauge
            self._kkt_matrix = K
            self._kkt_factor = sla.lu_factor(K)
        return self._kkt_factor

    # -- evaluation helpers ----------------------------------------------

    def project_to_pressure(self, cell_values):
        """Elementwise L2-projection of quadrature-point values onto the
        pressure space; exact for polynomials up to its degree."""
        coefs = np.empty((len(self.cells), self.pressure.n_local))
        for i in range(len(self.cells)):
            G = np.einsum("pq,rq,q->pr", self.pressure_vals[i],
                          self.pressure_vals[i], self.quad_weights[i])
            rhs = self.pressure_vals[i] @ (self.quad_weights[i]
                                           * cell_values[i])
            coefs[i] = np.linalg.solve(G, rhs)
        return coefs

    def source_integral(self, g_coefs):
        """Patch integral and L1 mass of a pressure-space source."""
        total = 0.0
        mass_l1 = 0.0
        for i in range(len(self.cells)):
            vals = g_coefs[i] @ self.pressure_vals[i]
            total += vals @ self.quad_weights[i]
            mass_l1 += np.abs(vals) @ self.quad_weights[i]
        return float(total), float(mass_l1)

    def normal_trace_values(self, coefs, face_id, cell):
        """Normal trace of a per-cell coefficient block on one face at
        its quadrature points (orientation: global ascending-index
        normal)."""
        mesh, k = self.mesh, self.degree
        verts = mesh.vertices[mesh.faces[face_id]]
        if mesh.dim == 1:
            pts = verts.reshape(1, 1)
            normal = np.array([1.0])
        else:
            va, vb = verts
            tang = vb - va
            normal = np.array([tang[1], -tang[0]]) / np.linalg.norm(tang)
            tq, _ = gauss_interval(2 * k + 2)
            pts = va + np.outer(tq, tang)
        i = self.cells.index(cell)
        sq = (pts - self.centers[i]) / self.scales[i]
        vals, _ = _rtn_tables(mesh.dim, k, sq)
        return (coefs[i] @ vals.reshape(self.nb, -1)).reshape(len(pts), -1) @ normal


class PatchSolution:
    """Result of one patch minimization."""

    def __init__(self, coefs, objective, multiplier_mean):
        self.coefs = coefs              # (n_patch_cells, nb)
        self.objective = objective      # value of |v + target|^2
        self.multiplier_mean = multiplier_mean


def patch_source(sol, patch_space, n):
    """Hat-weighted residual source g^{a,n} of one patch and interval.

    g = psi_a f_{h,tau} - psi_a d/dt U_{h,tau} - grad psi_a . grad u_n,
    exactly represented in the pressure space (degree >= p+1); interior
    vertices get a zero-mean check at 1e-11 of the L1 mass.
    """
    mesh = patch_space.mesh
    space = sol.system.space
    tau = sol.partition.steps[n - 1]
    du = (sol.node_values[n] - sol.node_values[n - 1]) / tau
    du_full = space.full_coefficients(du)
    un_full = space.full_coefficients(sol.node_values[n])
    f_cell = sol.rhs_cell[n - 1] if sol.rhs_cell is not None else None

    ref = patch_space.ref_points
    phi = _shape_values(mesh.dim, space.degree, ref)
    gref = _shape_grads(mesh.dim, space.degree, ref)
    values = []
    for i, c in enumerate(patch_space.cells):
        hat_vals, hat_grad = _hat_tables(mesh, c, patch_space.patch.vertex, ref)
        fq = (f_cell.cell_coefs[c] @ phi) if f_cell is not None else 0.0
        duq = du_full[space.cell_dofs[c]] @ phi
        gphys = np.einsum("bqd,de->bqe", gref, mesh.cell_invjac[c])
        grad_u = np.einsum("b,bqe->qe", un_full[space.cell_dofs[c]], gphys)
        values.append(hat_vals * (fq - duq) - grad_u @ hat_grad)
    g = patch_space.project_to_pressure(values)
    if patch_space.patch.is_interior:
        total, mass_l1 = patch_space.source_integral(g)
        if abs(total) > 1e-11 * max(mass_l1, 1e-300):
            raise CompatibilityError(
                f"interior patch source has mean {total:.3e} "
                f"(L1 mass {mass_l1:.3e})")
    return g


def patch_target(sol, patch_space, n):
    """psi_a grad u_n at the patch quadrature points, (ncell, nq, dim)."""
    mesh = patch_space.mesh
    space = sol.system.space
    un_full = space.full_coefficients(sol.node_values[n])
    ref = patch_space.ref_points
    gref = _shape_grads(mesh.dim, space.degree, ref)
    out = np.empty((len(patch_space.cells), len(np.atleast_2d(ref)), mesh.dim))
    for i, c in enumerate(patch_space.cells):
        hat_vals, _ = _hat_tables(mesh, c, patch_space.patch.vertex, ref)
        gphys = np.einsum("bqd,de->bqe", gref, mesh.cell_invjac[c])
        grad_u = np.einsum("b,bqe->qe", un_full[space.cell_dofs[c]], gphys)
        out[i] = hat_vals[:, None] * grad_u
    return out


def solve_patch(patch_space, g_coefs, target_values):
    """Minimize |v + target| over the patch flux space subject to
    div v = g, via the bordered saddle-point system.

    Returns a `PatchSolution`; raises if the optimality (KKT) residual
    exceeds 1e-10 relative or the constraint residual exceeds
    1e-10 (1 + |g|)."""
    ps = patch_space
    nv, nt = ps.n_vars, ps.trace_rows.shape[0]
    nd = ps.div_rows.shape[0]
    ng = 1 if ps.pressure.zero_mean else 0
    rhs = np.zeros(nv + nt + nd + ng)
    for i in range(len(ps.cells)):
        o = i * ps.nb
        rhs[o:o + ps.nb] = -np.einsum("bqd,qd,q->b", ps.basis_vals[i],
                                      target_values[i], ps.quad_weights[i])
        ro = nv + nt + i * ps.pressure.n_local
        G = np.einsum("pq,rq,q->pr", ps.pressure_vals[i],
                      ps.pressure_vals[i], ps.quad_weights[i])
        rhs[ro:ro + ps.pressure.n_local] = G @ g_coefs[i]
    sol_vec = sla.lu_solve(ps.kkt_factor(), rhs)

    res = ps._kkt_matrix @ sol_vec - rhs
    scale = np.linalg.norm(rhs) or 1.0
    if np.linalg.norm(res) > 1e-10 * scale:
        raise PatchSolveError(
            f"saddle KKT residual {np.linalg.norm(res) / scale:.3e}")
    v = sol_vec[:nv].reshape(len(ps.cells), ps.nb)
    mean_mult = float(sol_vec[-1]) if ng else 0.0

    # constraint residual |div v - g| over the patch
    norm_g_sq = 0.0
    err_sq = 0.0
    obj = 0.0
    for i in range(len(ps.cells)):
        gq = g_coefs[i] @ ps.pressure_vals[i]
        dq = v[i] @ ps.basis_divs[i]
        err_sq += (dq - gq) ** 2 @ ps.quad_weights[i]
        norm_g_sq += gq ** 2 @ ps.quad_weights[i]
        diff = np.einsum("b,bqd->qd", v[i], ps.basis_vals[i]) + target_values[i]
        obj += np.einsum("qd,qd,q->", diff, diff, ps.quad_weights[i])
    if np.sqrt(err_sq) > 1e-10 * (1.0 + np.sqrt(norm_g_sq)):
        raise PatchSolveError(
            f"divergence constraint residual {np.sqrt(err_sq):.3e}")
    return PatchSolution(v, float(obj), mean_mult)


def solve_patch_nullspace(patch_space, g_coefs, target_values):
    """Dense null-space quadratic program, kept as an independent check
    of the saddle-point route: parametrize the feasible set by a basis
    of ker(B) and solve the reduced normal equations."""
    ps = patch_space
    nv = ps.n_vars
    B = np.vstack([ps.trace_rows, ps.div_rows])
    d = np.zeros(B.shape[0])
    nt = ps.trace_rows.shape[0]
    for i in range(len(ps.cells)):
        ro = nt + i * ps.pressure.n_local
        G = np.einsum("pq,rq,q->pr", ps.pressure_vals[i],
                      ps.pressure_vals[i], ps.quad_weights[i])
        d[ro:ro + ps.pressure.n_local] = G @ g_coefs[i]
    c = np.zeros(nv)
    for i in range(len(ps.cells)):
        o = i * ps.nb
        c[o:o + ps.nb] = np.einsum("bqd,qd,q->b", ps.basis_vals[i],
                                   target_values[i], ps.quad_weights[i])
    v0, *_ = np.linalg.lstsq(B, d, rcond=None)
    N = sla.null_space(B)
    red = N.T @ ps.mass @ N
    y = np.linalg.solve(red, -N.T @ (ps.mass @ v0 + c))
    v = v0 + N @ y
    return v.reshape(len(ps.cells), ps.nb)


class EquilibratedFlux:
    """Global piecewise constant-in-time H(div) flux, one per-cell
    coefficient block per interval in the cell-centered scaled RTN
    basis."""

    def __init__(self, mesh, degree, partition, coefs):
        self.mesh = mesh
        self.degree = int(degree)
        self.partition = partition
        self.coefs = np.asarray(coefs, dtype=float)
        nb = rtn_dimension(mesh.dim, self.degree)
        if self.coefs.shape != (partition.n_steps, mesh.n_cells, nb):
            raise ValueError("flux coefficient array has wrong shape")
        self._centers, self._scales = _cell_frames(mesh,
                                                   np.arange(mesh.n_cells))

    def cell_tables(self, ref_points):
        """Per-cell basis values and physical divergences at reference
        quadrature points: lists of (nb, nq, dim) and (nb, nq)."""
        vals, divs = [], []
        for c in range(self.mesh.n_cells):
            xq = self.mesh.map_to_physical(c, ref_points)
            sq = (xq - self._centers[c]) / self._scales[c]
            v, d = _rtn_tables(self.mesh.dim, self.degree, sq)
            vals.append(v)
            divs.append(d / self._scales[c])
        return vals, divs

    def divergence_values(self, n, ref_points):
        """(nc, nq) physical divergence on interval n at reference points."""
        _, divs = self.cell_tables(ref_points)
        return np.stack([self.coefs[n - 1, c] @ divs[c]
                         for c in range(self.mesh.n_cells)])

    def values(self, n, ref_points):
        """(nc, nq, dim) flux values on interval n at reference points."""
        vals, _ = self.cell_tables(ref_points)
        return np.stack([
            np.einsum("b,bqd->qd", self.coefs[n - 1, c], vals[c])
            for c in range(self.mesh.n_cells)])

    def normal_jump_max(self):
        """Largest interior-face normal jump over all intervals and face
        quadrature points; zero for an H(div)-conforming field."""
        mesh = self.mesh
        worst = 0.0
        for f in range(len(mesh.faces)):
            owners = mesh.face_cells[f]
            if len(owners) != 2:
                continue
            verts = mesh.vertices[mesh.faces[f]]
            if mesh.dim == 1:
                pts = verts.reshape(1, 1)
                normal = np.array([1.0])
            else:
                va, vb = verts
                tang = vb - va
                normal = np.array([tang[1], -tang[0]]) / np.linalg.norm(tang)
                tq, _ = gauss_interval(2 * self.degree + 2)
                pts = va + np.outer(tq, tang)
            traces = []
            for c in owners:
                sq = (pts - self._centers[c]) / self._scales[c]
                v, _ = _rtn_tables(mesh.dim, self.degree, sq)
                vn = v @ normal
                traces.append(self.coefs[:, c] @ vn)  # (N, nqf)
            worst = max(worst, float(np.abs(traces[0] - traces[1]).max()))
        return worst


def build_patch_spaces(mesh, degree):
    """One `RTNPatchSpace` per vertex, in ascending vertex order."""
    from .mesh import vertex_patches
    return [RTNPatchSpace(mesh, p, degree) for p in vertex_patches(mesh)]


def assemble_flux(sol, degree=None, patch_spaces=None):
    """Assemble the global equilibrated flux of an implicit Euler run.

    Solves every vertex-patch problem on every interval and sums the
    local fluxes in ascending vertex order (deterministic assembly).
    `degree` defaults to p + 1.
    """
    space = sol.system.space
    if space is None:
        raise ValueError("flux assembly requires a mesh-based solution")
    if degree is None:
        degree = space.degree + 1
    if degree < space.degree + 1:
        raise ValueError("flux degree must be at least p + 1")
    mesh = space.mesh
    if patch_spaces is None:
        patch_spaces = build_patch_spaces(mesh, degree)
    nb = rtn_dimension(mesh.dim, degree)
    coefs = np.zeros((sol.partition.n_steps, mesh.n_cells, nb))
    for n in range(1, sol.partition.n_steps + 1):
        for ps in patch_spaces:
            g = patch_source(sol, ps, n)
            target = patch_target(sol, ps, n)
            local = solve_patch(ps, g, target)
            for i, c in enumerate(ps.cells):
                coefs[n - 1, c] += local.coefs[i]
    return EquilibratedFlux(mesh, degree, sol.partition, coefs)


def equilibration_residual(flux, sol):
    """Normalized max-norm defect of f_{h,tau} - d/dt U - div sigma over
    all intervals, cells, and quadrature points."""
    space = sol.system.space
    mesh = space.mesh
    ref, _, phi, _ = space.tables(space.default_quad_degree())
    _, divs = flux.cell_tables(ref)
    worst = 0.0
    f_scale = 0.0
    for n in range(1, sol.partition.n_steps + 1):
        tau = sol.partition.steps[n - 1]
        du = (sol.node_values[n] - sol.node_values[n - 1]) / tau
        du_full = space.full_coefficients(du)
        f_cell = sol.rhs_cell[n - 1] if sol.rhs_cell is not None else None
        for c in range(mesh.n_cells):
            duq = du_full[space.cell_dofs[c]] @ phi
            fq = (f_cell.cell_coefs[c] @ phi) if f_cell is not None else 0.0
            divq = flux.coefs[n - 1, c] @ divs[c]
            defect = fq - duq - divq
            worst = max(worst, float(np.abs(defect).max()))
            f_scale = max(f_scale, float(np.abs(fq).max()) if f_cell else 0.0)
    return worst / (1.0 + f_scale)
