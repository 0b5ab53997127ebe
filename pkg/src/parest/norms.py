"""Space-time norms, discrete dual norms, and inf-sup identity checks.

Negative-order norms are never computed exactly; every dual norm here is
the surrogate obtained by a Riesz lift onto a finite test space.  With
the lift equal to the trial space the identities of the inf-sup theory
are exact algebraic identities and are verified to near round-off; finer
lifts sharpen the surrogate towards the continuous value and the context
records the refinement level used.
"""

import numpy as np
import scipy.sparse as sp

from .spaces import solve_spd

X_NORM = "X"
Y_NORM = "Y"
YT_NORM = "Y_T"
YS_NORM = "Y_star"
ENERGY_NORM = "energy"
NORM_KINDS = (X_NORM, Y_NORM, YT_NORM, YS_NORM, ENERGY_NORM)

_AFFINE_ONLY = (Y_NORM, YT_NORM, YS_NORM)


class ProfileMismatchError(ValueError):
    """A Y-type norm was requested for a time-discontinuous profile."""


class RieszLiftContext:
    """Dual-norm evaluation data: lift system, factored stiffness, and
    the prolongation from the trial space into the lift space."""

    def __init__(self, system, lift_system=None, prolong=None, refinement=1):
        self.system = system
        self.lift_system = lift_system or system
        self.refinement = refinement
        if prolong is None and self.lift_system.dim != system.dim:
            raise ValueError("non-trivial lift requires a prolongation")
        self.prolong = prolong

    def to_lift(self, coef):
        if self.prolong is None:
            return coef
        return self.prolong @ coef

    def riesz_of_load(self, load):
        """Solve (grad w, grad v) = <l, v> on the lift space."""
        return solve_spd(self.lift_system.stiffness, load)

    def dual_norm_sq_of_load(self, load):
        return float(load @ self.riesz_of_load(load))

    def h_minus1_sq(self, coef):
        """Lift-space surrogate of the H^-1 norm (squared) of a trial
        function given by a free-dof coefficient vector."""
        load = self.lift_system.mass.apply(self.to_lift(coef))
        return self.dual_norm_sq_of_load(load)

    def riesz(self, coef):
        load = self.lift_system.mass.apply(self.to_lift(coef))
        return self.riesz_of_load(load)


def make_lift_context(system, refine=1, degree=None):
    """Build a lift context on a `refine`-times finer mesh of the same
    family (optionally with a higher polynomial degree)."""
    from .mesh import refine_mesh
    from .spaces import ScalarSpace, prolongation
    from .timestepping import DiscreteSystem
    space = system.space
    if refine == 1 and (degree is None or space is None
                        or degree == space.degree):
        return RieszLiftContext(system)
    if space is None:
        raise ValueError("refined lift requires a system with a space")
    lift_space = ScalarSpace(refine_mesh(space.mesh, refine),
                             degree or space.degree)
    P = prolongation(space, lift_space)
    return RieszLiftContext(system, DiscreteSystem.from_space(lift_space),
                            prolong=P, refinement=refine)


def _affine_quadratic(A_op, left, right):
    """tau-free part of int_0^1 |(1-s) l + s r|_A^2 ds."""
    Al = A_op.apply(left)
    Ar = A_op.apply(right)
    return (left @ Al + left @ Ar + right @ Ar) / 3.0


def dual_norm(functional, ctx, steps=None):
    """Lift-space dual norm of a functional.

    A single load vector gives the stationary dual norm; a sequence of
    per-interval load vectors (with `steps` the time-step lengths, the
    functionals being constant on each interval) gives the
    L2-in-time aggregate.
    """
    functional = np.asarray(functional, dtype=float)
    if functional.ndim == 1:
        return float(np.sqrt(ctx.dual_norm_sq_of_load(functional)))
    if steps is None or len(steps) != len(functional):
        raise ValueError("per-interval functionals need matching steps")
    total = sum(tau * ctx.dual_norm_sq_of_load(l)
                for tau, l in zip(steps, functional))
    return float(np.sqrt(total))


def spacetime_norm(v, kind, ctx=None):
    """Evaluate a space-time norm of a `SpaceTimeFunction`.

    Y-type norms require the continuous-affine profile and a lift
    context for the H^-1 terms of the time derivative.
    """
    if kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {kind!r}")
    needs_dual = kind in _AFFINE_ONLY
    if needs_dual and v.profile != "continuous_affine":
        raise ProfileMismatchError(
            f"{kind} norm requires the continuous_affine profile")
    if needs_dual and ctx is None:
        raise ValueError(f"{kind} norm requires a Riesz lift context")
    system = v.system
    part = v.partition
    total = 0.0
    for n in range(1, part.n_steps + 1):
        tau = part.steps[n - 1]
        left, right = v.endpoints(n)
        total += tau * _affine_quadratic(system.stiffness, left, right)
        if needs_dual:
            total += tau * ctx.h_minus1_sq(v.time_derivative(n))
    if kind == X_NORM:
        return float(np.sqrt(total))
    mass = system.mass
    vT = v.final_value()
    v0 = v.initial_value()
    if kind == Y_NORM:
        total += vT @ mass.apply(vT)
    elif kind == YT_NORM:
        total += v0 @ mass.apply(v0)
    elif kind == YS_NORM:
        total += vT @ mass.apply(vT) + v0 @ mass.apply(v0)
    else:  # energy
        total += 0.5 * (vT @ mass.apply(vT))
    return float(np.sqrt(total))


def ys_identity_residual(v, ctx):
    """Relative gap between the defining form of the time-reversal
    invariant norm and its heat-operator reformulation
    2|v(T)|^2 + int |(d/dt + Laplacian) v|_{H^-1}^2 dt."""
    if v.profile != "continuous_affine":
        raise ProfileMismatchError("identity requires continuous_affine profile")
    a_sq = spacetime_norm(v, YS_NORM, ctx) ** 2
    if a_sq == 0.0:
        return 0.0
    lift = ctx.lift_system
    part = v.partition
    b_sq = 0.0
    for n in range(1, part.n_steps + 1):
        tau = part.steps[n - 1]
        d = ctx.to_lift(v.time_derivative(n))
        left, right = (ctx.to_lift(c) for c in v.endpoints(n))
        base = lift.mass.apply(d)
        r_left = ctx.riesz_of_load(base - lift.stiffness.apply(left))
        r_right = ctx.riesz_of_load(base - lift.stiffness.apply(right))
        b_sq += tau * _affine_quadratic(lift.stiffness, r_left, r_right)
    vT = ctx.to_lift(v.node_values[-1])
    b_sq += 2.0 * (vT @ lift.mass.apply(vT))
    return float(abs(a_sq - b_sq) / a_sq)


def infsup_identity_residual(v, ctx):
    """Relative residual of |v|_Y^2 = |w* + v|_X^2 + |v(0)|^2 with
    w* the interval-wise Riesz lift of the time derivative."""
    if v.profile != "continuous_affine":
        raise ProfileMismatchError("identity requires continuous_affine profile")
    y_sq = spacetime_norm(v, Y_NORM, ctx) ** 2
    if y_sq == 0.0:
        return 0.0
    lift = ctx.lift_system
    part = v.partition
    x_sq = 0.0
    for n in range(1, part.n_steps + 1):
        tau = part.steps[n - 1]
        w = ctx.riesz(v.time_derivative(n))
        left, right = (ctx.to_lift(c) for c in v.endpoints(n))
        x_sq += tau * _affine_quadratic(lift.stiffness, w + left, w + right)
    v0 = ctx.to_lift(v.node_values[0])
    lhs = x_sq + v0 @ lift.mass.apply(v0)
    return float(abs(lhs - y_sq) / y_sq)


def residual_dual_norm_Y(candidate, data, ctx, time_points=5):
    """Lift-space dual norm of the heat-equation residual of an affine
    reconstruction, aggregated in L2 over time.

    `data` is the source: a sequence of per-interval `CellFunction`s
    (piecewise constant in time) or a callable f(points, t).  With the
    discrete source the scheme makes the residual vanish at the right
    end of every interval, and the aggregate collapses to a dual-norm
    surrogate of the jump estimator.
    """
    from .quadrature import gauss_interval
    from .spaces import load_vector as space_load
    if candidate.profile != "continuous_affine":
        raise ProfileMismatchError("residual needs the affine reconstruction")
    lift = ctx.lift_system
    part = candidate.partition
    lift_space = lift.space
    piecewise_const = not callable(data)
    total = 0.0
    for n in range(1, part.n_steps + 1):
        tau = part.steps[n - 1]
        d = ctx.to_lift(candidate.time_derivative(n))
        left, right = (ctx.to_lift(c) for c in candidate.endpoints(n))
        drift = lift.mass.apply(d)
        if piecewise_const:
            g = data[n - 1]
            if g.space is lift_space or lift_space is None:
                b = g.load_vector()
            else:
                b = cell_function_load_on(g, lift_space)
            # residual load is affine in t: two-point Gauss is exact
            r0 = ctx.riesz_of_load(b - drift - lift.stiffness.apply(left))
            r1 = ctx.riesz_of_load(b - drift - lift.stiffness.apply(right))
            total += tau * _affine_quadratic(lift.stiffness, r0, r1)
        else:
            tq, tw = gauss_interval(2 * time_points - 1)
            for s, w in zip(tq, tw):
                t = part.nodes[n - 1] + tau * s
                b = space_load(lift_space, lambda x: data(x, t))
                u_t = (1.0 - s) * left + s * right
                load = b - drift - lift.stiffness.apply(u_t)
                total += tau * w * ctx.dual_norm_sq_of_load(load)
    return float(np.sqrt(total))


def cell_function_load_on(cell_func, target_space):
    """Load vector of a (coarse) per-cell polynomial tested against the
    basis of a nested finer space."""
    pts, wts, phi, _ = target_space.tables(target_space.default_quad_degree())
    mesh = target_space.mesh
    out = np.zeros(target_space.n_dofs)
    src_space = cell_func.space
    from .spaces import _shape_values
    for k in range(mesh.n_cells):
        xq = mesh.map_to_physical(k, pts)
        cells, refs = src_space.mesh.locate(xq)
        fq = np.empty(len(xq))
        for i, (kc, xi) in enumerate(zip(cells, refs)):
            sv = _shape_values(src_space.mesh.dim, src_space.degree,
                               xi.reshape(1, -1))[:, 0]
            fq[i] = cell_func.cell_coefs[kc] @ sv
        out[target_space.cell_dofs[k]] += mesh.cell_detjac[k] * (phi @ (wts * fq))
    return out[target_space.free_index]


def backward_representer(v, ctx):
    """Discrete backward-in-time representer of the X-norm.

    Solves the adjoint heat equation marching backward from a zero
    final condition with affine trial / piecewise-constant test
    functions, and returns (phi_star, ratio) where the ratio
    B_X(v, phi*) / |phi*|_{Y_T} is a computable lower bound for |v|_X.
    """
    from .timestepping import SpaceTimeFunction
    system = v.system
    part = v.partition
    M, A = system.mass, system.stiffness
    phi = np.zeros((part.n_steps + 1, system.dim))
    for n in range(part.n_steps, 0, -1):
        tau = part.steps[n - 1]
        left, right = v.endpoints(n)
        source = tau * A.apply(0.5 * (left + right))
        op_key = ("bwd", tau)
        op = system._step_ops.get(op_key)
        if op is None:
            from .spaces import SymmetricOperator
            op = SymmetricOperator(M.mat + 0.5 * tau * A.mat)
            system._step_ops[op_key] = op
        rhs = M.apply(phi[n]) - 0.5 * tau * A.apply(phi[n]) + source
        phi[n - 1] = solve_spd(op, rhs)
    phi_star = SpaceTimeFunction(system, part, phi, "continuous_affine")
    denom = spacetime_norm(phi_star, YT_NORM, ctx)
    if denom == 0.0:
        return phi_star, 0.0
    # B_X(v, phi*) = sum_n int_In [-(d/dt phi*, v) + (grad v, grad phi*)]
    bx = 0.0
    for n in range(1, part.n_steps + 1):
        tau = part.steps[n - 1]
        left, right = v.endpoints(n)
        dphi = (phi[n] - phi[n - 1]) / tau
        bx -= dphi @ M.apply(tau * 0.5 * (left + right))
        pl, pr = phi[n - 1], phi[n]
        Apl = A.apply(pl)
        Apr = A.apply(pr)
        bx += tau * (left @ Apl / 3.0 + (left @ Apr + right @ Apl) / 6.0
                     + right @ Apr / 3.0)
    return phi_star, float(bx / denom)
