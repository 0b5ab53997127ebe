"""Oracles: manufactured solutions, reference solves, and exact errors.

Everything here exists to check the estimator machinery against
independent ground truth: closed-form solutions evaluated by high-order
quadrature, and fine-grid reference solutions with exact nested-space
prolongations.
"""

import numpy as np

from .mesh import refine_mesh
from .quadrature import gauss_interval
from .spaces import ScalarSpace, l2_projection, load_vector, prolongation
from .timestepping import (DiscreteSystem, IntervalAffineFunction,
                           SpaceTimeFunction, TimePartition, implicit_euler_run,
                           time_mean_rhs)


class ManufacturedProblem:
    """Closed-form heat equation data: u, grad u, du/dt, f, u0.

    Evaluators take points of shape (n, dim) and a scalar time.  The
    forcing is checked against d/dt u - Laplacian u by centered finite
    differences at construction.
    """

    def __init__(self, dim, exact, grad, dt, forcing, final_time=1.0,
                 check=True):
        self.dim = dim
        self.exact = exact
        self.grad = grad
        self.dt = dt
        self.forcing = forcing
        self.final_time = float(final_time)
        if check:
            self._consistency_check()

    def initial(self, points):
        return self.exact(points, 0.0)

    def _consistency_check(self, n_points=100, step=1e-5, tol=1e-6):
        rng = np.random.default_rng(7)
        x = rng.uniform(0.05, 0.95, size=(n_points, self.dim))
        t = rng.uniform(0.1, 0.9 * self.final_time, size=n_points)
        scale = 1.0
        for i in range(n_points):
            xi = x[i:i + 1]
            ti = t[i]
            ut = (self.exact(xi, ti + step) - self.exact(xi, ti - step)) / (2 * step)
            lap = 0.0
            for d in range(self.dim):
                e = np.zeros(self.dim)
                e[d] = step
                lap += (self.exact(xi + e, ti) - 2 * self.exact(xi, ti)
                        + self.exact(xi - e, ti)) / step ** 2
            f_fd = float(np.asarray(ut - lap).ravel()[0])
            f_ex = float(np.asarray(self.forcing(xi, ti)).ravel()[0])
            scale = max(scale, abs(f_ex))
            if abs(f_fd - f_ex) > tol * scale * 10:
                raise ValueError(
                    f"forcing inconsistent with u at x={xi}, t={ti}: "
                    f"fd {f_fd:.8e} vs exact {f_ex:.8e}")


def manufactured(kind, *args):
    """Built-in manufactured problems.

    kinds: fourier_1d(k, decay), fourier_2d(kx, ky, decay),
    polynomial_in_time().
    """
    if kind == "fourier_1d":
        k, mu = args
        if k < 1:
            raise ValueError("mode index must be >= 1")
        kp = k * np.pi
        exact = lambda x, t: np.sin(kp * x[:, 0]) * np.exp(-mu * t)
        grad = lambda x, t: (kp * np.cos(kp * x[:, 0])
                             * np.exp(-mu * t))[:, None]
        dt = lambda x, t: -mu * np.sin(kp * x[:, 0]) * np.exp(-mu * t)
        forcing = lambda x, t: (kp ** 2 - mu) * np.sin(kp * x[:, 0]) * np.exp(-mu * t)
        return ManufacturedProblem(1, exact, grad, dt, forcing)
    if kind == "fourier_2d":
        kx, ky, mu = args
        if kx < 1 or ky < 1:
            raise ValueError("mode indices must be >= 1")
        a, b = kx * np.pi, ky * np.pi
        lam = a ** 2 + b ** 2

        def exact(x, t):
            return np.sin(a * x[:, 0]) * np.sin(b * x[:, 1]) * np.exp(-mu * t)

        def grad(x, t):
            e = np.exp(-mu * t)
            return np.column_stack([
                a * np.cos(a * x[:, 0]) * np.sin(b * x[:, 1]) * e,
                b * np.sin(a * x[:, 0]) * np.cos(b * x[:, 1]) * e])

        dt = lambda x, t: -mu * exact(x, t)
        forcing = lambda x, t: (lam - mu) * exact(x, t)
        return ManufacturedProblem(2, exact, grad, dt, forcing)
    if kind == "polynomial_in_time":
        exact = lambda x, t: t * x[:, 0] * (1.0 - x[:, 0])
        grad = lambda x, t: (t * (1.0 - 2.0 * x[:, 0]))[:, None]
        dt = lambda x, t: x[:, 0] * (1.0 - x[:, 0])
        forcing = lambda x, t: x[:, 0] * (1.0 - x[:, 0]) + 2.0 * t
        return ManufacturedProblem(1, exact, grad, dt, forcing)
    raise ValueError(f"unknown manufactured kind {kind!r}")


def discrete_setup(problem, mesh, degree, n_steps, time_points=16):
    """Build the system, partition, discrete source, and initial datum
    of a manufactured problem."""
    space = ScalarSpace(mesh, degree)
    system = DiscreteSystem.from_space(space)
    part = TimePartition.uniform(n_steps, problem.final_time)
    rhs = time_mean_rhs(problem.forcing, part, space, time_points=time_points)
    u0 = l2_projection(space, problem.initial, mass=system.mass)
    return system, part, rhs, u0


def solve_manufactured(problem, mesh, degree, n_steps, time_points=16):
    system, part, rhs, u0 = discrete_setup(problem, mesh, degree, n_steps,
                                           time_points=time_points)
    return implicit_euler_run(system, part, rhs, u0)


class ReferenceSolution:
    """Fine-grid implicit Euler run with the prolongation from a coarse
    space; errors of coarse functions are measured after embedding into
    the fine discretization."""

    def __init__(self, sol, coarse_space, space_refine, time_refine):
        self.sol = sol
        self.system = sol.system
        self.partition = sol.partition
        self.space_refine = int(space_refine)
        self.time_refine = int(time_refine)
        self.coarse_space = coarse_space
        self.prolong = (prolongation(coarse_space, sol.system.space)
                        if coarse_space is not None else None)

    def to_fine(self, coef):
        if self.prolong is None:
            return coef
        return self.prolong @ coef

    def embed(self, fn):
        """Coarse space-time function carried to the fine grid.

        The continuous-affine profile embeds as itself; the one-sided
        profiles embed as general interval-affine functions with jumps
        at the coarse time nodes.
        """
        part = self.partition
        if fn.system is self.system and fn.partition is part:
            return fn
        if fn.profile == "continuous_affine":
            vals = np.stack([self.to_fine(fn.at_time(t)) for t in part.nodes])
            return SpaceTimeFunction(self.system, part, vals,
                                     "continuous_affine")
        lefts = np.empty((part.n_steps, self.system.dim))
        rights = np.empty((part.n_steps, self.system.dim))
        for k in range(1, part.n_steps + 1):
            t0, t1 = part.nodes[k - 1], part.nodes[k]
            n = fn.partition.interval_of(t1)
            cl, cr = fn.endpoints(n)
            ct0 = fn.partition.nodes[n - 1]
            ctau = fn.partition.steps[n - 1]
            s0 = (t0 - ct0) / ctau
            s1 = (t1 - ct0) / ctau
            lefts[k - 1] = self.to_fine((1 - s0) * cl + s0 * cr)
            rights[k - 1] = self.to_fine((1 - s1) * cl + s1 * cr)
        return IntervalAffineFunction(self.system, part, lefts, rights)

    def reconstruction(self, profile):
        from .timestepping import reconstruct
        return reconstruct(self.sol, profile)

    def difference(self, fn):
        """Reference affine reconstruction minus the embedded fn.

        The affine reconstruction of the fine run stands in for the
        exact solution; the result is affine per fine interval."""
        from .timestepping import reconstruct
        emb = self.embed(fn)
        ref = reconstruct(self.sol, "continuous_affine")
        if emb.profile == "continuous_affine":
            return ref - emb
        part = self.partition
        lefts = np.empty((part.n_steps, self.system.dim))
        rights = np.empty_like(lefts)
        for n in range(1, part.n_steps + 1):
            rl, rr = ref.endpoints(n)
            el, er = emb.endpoints(n)
            lefts[n - 1] = rl - el
            rights[n - 1] = rr - er
        return IntervalAffineFunction(self.system, part, lefts, rights)

    def error_of(self, fn, kind, ctx=None):
        """Norm of the difference between the reference reconstruction
        and the embedded coarse function, on the fine grid."""
        from .norms import spacetime_norm
        return spacetime_norm(self.difference(fn), kind, ctx)

    def _coarse_cell_map(self):
        if not hasattr(self, "_cell_map"):
            fine_mesh = self.system.space.mesh
            cents = fine_mesh.vertices[fine_mesh.cells].mean(axis=1)
            self._cell_map, _ = self.coarse_space.mesh.locate(cents)
        return self._cell_map

    def local_grad_error_sq(self, fn, coarse_partition):
        """Per-(coarse cell, coarse interval) table of the squared
        L2-in-time H1-seminorm error of fn against the reference."""
        diff = self.difference(fn)
        space = self.system.space
        mesh = space.mesh
        qd = space.default_quad_degree()
        _, wts, _, _ = space.tables(qd)
        cell_map = self._coarse_cell_map()
        n_coarse = self.coarse_space.mesh.n_cells
        out = np.zeros((coarse_partition.n_steps, n_coarse))
        for k in range(1, self.partition.n_steps + 1):
            tau = self.partition.steps[k - 1]
            t_mid = 0.5 * (self.partition.nodes[k - 1] + self.partition.nodes[k])
            nc = coarse_partition.interval_of(t_mid)
            l, r = diff.endpoints(k)
            gl = space.cell_gradients(l, quad_degree=qd)
            gr = space.cell_gradients(r, quad_degree=qd)
            per_cell = (tau / 3.0) * mesh.cell_detjac * (
                np.einsum("cqd,cqd,q->c", gl, gl, wts)
                + np.einsum("cqd,cqd,q->c", gl, gr, wts)
                + np.einsum("cqd,cqd,q->c", gr, gr, wts))
            np.add.at(out[nc - 1], cell_map, per_cell)
        return out

    def local_dual_error_sq(self, fn, coarse_partition, ctx):
        """Per-coarse-interval lift surrogate of the squared
        L2-in-time H^-1 error of the time derivative of fn."""
        diff = self.difference(fn)
        out = np.zeros(coarse_partition.n_steps)
        for k in range(1, self.partition.n_steps + 1):
            tau = self.partition.steps[k - 1]
            t_mid = 0.5 * (self.partition.nodes[k - 1] + self.partition.nodes[k])
            nc = coarse_partition.interval_of(t_mid)
            out[nc - 1] += tau * ctx.h_minus1_sq(diff.time_derivative(k))
        return out


def reference_solve(problem, mesh, degree, n_steps, space_refine=4,
                    time_refine=4, time_points=16, dof_cap=2_000_000):
    """Reference run of a manufactured problem on a refined grid.

    The coarse discretization (mesh, degree, n_steps) fixes the nesting;
    refinement factors must be at least 2.
    """
    if space_refine < 2 or time_refine < 2:
        raise ValueError("reference refinement factors must be >= 2")
    coarse_space = ScalarSpace(mesh, degree)
    fine_mesh = refine_mesh(mesh, space_refine)
    if fine_mesh.n_cells * (degree + 1) ** mesh.dim > dof_cap:
        raise MemoryError("reference discretization exceeds the dof cap")
    sol = solve_manufactured(problem, fine_mesh, degree,
                             n_steps * time_refine, time_points=time_points)
    return ReferenceSolution(sol, coarse_space, space_refine, time_refine)


def _crank_nicolson_run(system, partition, rhs, u0):
    """Second-order march (M + tau A/2) u_n = (M - tau A/2) u_{n-1}
    + tau b_n; used for reference runs only."""
    from .spaces import SymmetricOperator, solve_spd
    values = np.empty((partition.n_steps + 1, system.dim))
    values[0] = np.asarray(u0, dtype=float)
    for n, (tau, b) in enumerate(zip(partition.steps, rhs), start=1):
        key = ("cn", tau)
        op = system._step_ops.get(key)
        if op is None:
            op = SymmetricOperator(system.mass.mat + 0.5 * tau
                                   * system.stiffness.mat)
            system._step_ops[key] = op
        prev = values[n - 1]
        r = (system.mass.apply(prev) - 0.5 * tau * system.stiffness.apply(prev)
             + tau * b)
        values[n] = solve_spd(op, r)
    from .timestepping import TimeSlabSolution
    return TimeSlabSolution(system, partition, values, list(rhs))


def reference_for_discrete(sol, space_refine=4, time_refine=4,
                           scheme="crank_nicolson", dof_cap=2_000_000):
    """Reference run of the modified problem whose data are the discrete
    source and initial datum of a coarse run.

    On nested grids the coarse per-interval source is represented
    exactly, so the fine run converges to the exact solution of the
    perturbed problem that the hypercircle identities refer to.  The
    default time integrator is Crank-Nicolson: its second-order bias
    keeps the reference gap an order below the first-order errors being
    measured at moderate refinement factors.
    """
    if space_refine < 2 or time_refine < 2:
        raise ValueError("reference refinement factors must be >= 2")
    if sol.rhs_cell is None:
        raise ValueError("coarse run must carry its cellwise source")
    from .norms import cell_function_load_on
    coarse_space = sol.system.space
    degree = coarse_space.degree
    fine_mesh = refine_mesh(coarse_space.mesh, space_refine)
    if fine_mesh.n_cells * (degree + 1) ** fine_mesh.dim > dof_cap:
        raise MemoryError("reference discretization exceeds the dof cap")
    fine_space = ScalarSpace(fine_mesh, degree)
    fine_system = DiscreteSystem.from_space(fine_space)
    coarse_part = sol.partition
    nodes = [0.0]
    loads = []
    for n in range(coarse_part.n_steps):
        b = cell_function_load_on(sol.rhs_cell[n], fine_space)
        t0, t1 = coarse_part.nodes[n], coarse_part.nodes[n + 1]
        for j in range(1, time_refine + 1):
            nodes.append(t0 + (t1 - t0) * j / time_refine)
            loads.append(b)
    fine_part = TimePartition(np.array(nodes))
    P = prolongation(coarse_space, fine_space)
    u0 = P @ sol.node_values[0]
    if scheme == "crank_nicolson":
        fine_sol = _crank_nicolson_run(fine_system, fine_part, loads, u0)
    elif scheme == "euler":
        fine_sol = implicit_euler_run(fine_system, fine_part, loads, u0)
    else:
        raise ValueError(f"unknown reference scheme {scheme!r}")
    return ReferenceSolution(fine_sol, coarse_space, space_refine, time_refine)


def exact_error(problem, approx, kind, ctx=None, time_points=5):
    """Space-time quadrature of the error against the exact solution.

    kinds: X, energy, L2L2; the Y kind uses the lift surrogate of the
    residual time derivative and requires the affine profile.
    """
    from .norms import spacetime_norm
    system = approx.system
    space = system.space
    part = approx.partition
    qd = 2 * space.degree + 6
    ref, wts, phi, _ = space.tables(qd)
    mesh = space.mesh
    tq, tw = gauss_interval(2 * time_points - 1)

    def grad_err_sq(t):
        coef = approx.at_time(t)
        g = space.cell_gradients(coef, quad_degree=qd)
        total = 0.0
        for c in range(mesh.n_cells):
            xq = mesh.map_to_physical(c, ref)
            d = problem.grad(xq, t) - g[c]
            total += mesh.cell_detjac[c] * ((d ** 2).sum(axis=1) @ wts)
        return total

    def value_err_sq(t, coef):
        vals = space.cell_values(coef, quad_degree=qd)
        total = 0.0
        for c in range(mesh.n_cells):
            xq = mesh.map_to_physical(c, ref)
            d = problem.exact(xq, t) - vals[c]
            total += mesh.cell_detjac[c] * (d ** 2 @ wts)
        return total

    if kind in ("X", "energy"):
        total = 0.0
        for n in range(1, part.n_steps + 1):
            tau = part.steps[n - 1]
            t0 = part.nodes[n - 1]
            for s, w in zip(tq, tw):
                # one-sided evaluation keeps left-continuous profiles
                # inside the open interval
                total += tau * w * grad_err_sq(t0 + tau * s)
        if kind == "energy":
            total += 0.5 * value_err_sq(part.final_time,
                                        approx.at_time(part.final_time))
        return float(np.sqrt(total))
    if kind == "L2L2":
        total = 0.0
        for n in range(1, part.n_steps + 1):
            tau = part.steps[n - 1]
            t0 = part.nodes[n - 1]
            for s, w in zip(tq, tw):
                t = t0 + tau * s
                total += tau * w * value_err_sq(t, approx.at_time(t))
        return float(np.sqrt(total))
    if kind == "Y":
        if approx.profile != "continuous_affine":
            raise ValueError("Y-norm exact error needs the affine profile")
        if ctx is None:
            raise ValueError("Y-norm exact error needs a lift context")
        lift = ctx.lift_system
        total = 0.0
        for n in range(1, part.n_steps + 1):
            tau = part.steps[n - 1]
            t0 = part.nodes[n - 1]
            d = ctx.to_lift(approx.time_derivative(n))
            drift = lift.mass.apply(d)
            for s, w in zip(tq, tw):
                t = t0 + tau * s
                total += tau * w * grad_err_sq(t)
                b = load_vector(lift.space, lambda x: problem.dt(x, t))
                total += tau * w * ctx.dual_norm_sq_of_load(b - drift)
        uT = l2_projection(space, lambda x: problem.exact(x, part.final_time),
                           mass=system.mass)
        eT = uT - approx.at_time(part.final_time)
        total += eT @ system.mass.apply(eT)
        return float(np.sqrt(total))
    raise ValueError(f"unsupported error kind {kind!r}")
