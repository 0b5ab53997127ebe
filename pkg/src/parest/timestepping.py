"""Implicit Euler time-stepping and temporal reconstructions.

The solver operates on a `DiscreteSystem` (mass and stiffness operators
over the unconstrained dofs), so the single-mode surrogate used in the
comparison studies is literally a one-dof instance of the production
path, with mass 1 and stiffness equal to the decay rate.
"""

import numpy as np
import scipy.sparse as sp

from .quadrature import gauss_interval
from .spaces import SymmetricOperator, assemble, solve_spd


class TimePartition:
    """Strictly increasing time nodes 0 = t_0 < ... < t_N = T."""

    def __init__(self, nodes):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < 2:
            raise ValueError("need at least two time nodes")
        if abs(nodes[0]) > 0:
            raise ValueError("first time node must be 0")
        steps = np.diff(nodes)
        if np.any(steps <= 0):
            raise ValueError("time nodes must be strictly increasing")
        self.nodes = nodes
        self.steps = steps
        self.n_steps = len(steps)
        self.final_time = float(nodes[-1])

    @classmethod
    def uniform(cls, n_steps, final_time):
        return cls(np.linspace(0.0, final_time, n_steps + 1))

    def interval_of(self, t):
        """Index n >= 1 with t in (t_{n-1}, t_n]; maps t=0 to interval 1."""
        if t < self.nodes[0] - 1e-14 or t > self.final_time + 1e-14:
            raise ValueError(f"time {t} outside the partition")
        n = int(np.searchsorted(self.nodes, t, side="left"))
        return min(max(n, 1), self.n_steps)

    def reversed(self):
        return TimePartition(self.final_time - self.nodes[::-1])


class DiscreteSystem:
    """Mass/stiffness pair over the free dofs, plus optional space data."""

    def __init__(self, mass, stiffness, space=None):
        if mass.dim != stiffness.dim:
            raise ValueError("mass and stiffness dimensions differ")
        self.mass = mass
        self.stiffness = stiffness
        self.space = space
        self.dim = mass.dim
        self._step_ops = {}

    @classmethod
    def from_space(cls, space):
        return cls(assemble(space, "mass"), assemble(space, "stiffness"), space)

    @classmethod
    def modal(cls, decay_rate):
        """One-dof surrogate of a Fourier mode: M = 1, A = lambda."""
        if decay_rate <= 0:
            raise ValueError("decay rate must be positive")
        one = sp.csr_matrix(np.array([[1.0]]))
        lam = sp.csr_matrix(np.array([[float(decay_rate)]]))
        return cls(SymmetricOperator(one), SymmetricOperator(lam))

    def step_operator(self, tau):
        op = self._step_ops.get(tau)
        if op is None:
            op = SymmetricOperator(self.mass.mat / tau + self.stiffness.mat)
            self._step_ops[tau] = op
        return op

    def h1_norm_sq(self, coef):
        return float(coef @ self.stiffness.apply(coef))

    def l2_norm_sq(self, coef):
        return float(coef @ self.mass.apply(coef))


class CellFunction:
    """Discontinuous per-cell polynomial of the space's degree.

    Carries the elementwise L2-projection used to represent the
    time-averaged source; exposes quadrature values and load vectors.
    """

    def __init__(self, space, cell_coefs):
        self.space = space
        self.cell_coefs = np.asarray(cell_coefs, dtype=float)

    @classmethod
    def project(cls, space, func, quad_degree=None):
        """Elementwise L2-projection of `func(points)` to P_p per cell."""
        quad_degree = quad_degree or space.default_quad_degree()
        pts, wts, phi, _ = space.tables(quad_degree)
        local_mass = np.einsum("aq,bq,q->ab", phi, phi, wts)
        inv = np.linalg.inv(local_mass)
        coefs = np.empty((space.mesh.n_cells, phi.shape[0]))
        for k in range(space.mesh.n_cells):
            xq = space.mesh.map_to_physical(k, pts)
            fq = np.asarray(func(xq), dtype=float)
            coefs[k] = inv @ (phi @ (wts * fq))
        return cls(space, coefs)

    @classmethod
    def from_values(cls, space, values_func):
        """Alias of `project` for callables already piecewise P_p."""
        return cls.project(space, values_func)

    def values(self, quad_degree=None):
        """Values at cell quadrature points, (nc, nq)."""
        quad_degree = quad_degree or self.space.default_quad_degree()
        _, _, phi, _ = self.space.tables(quad_degree)
        return self.cell_coefs @ phi

    def load_vector(self):
        """Free-dof vector of (self, phi_a)_Omega."""
        space = self.space
        pts, wts, phi, _ = space.tables(space.default_quad_degree())
        vals = self.values()
        out = np.zeros(space.n_dofs)
        for k in range(space.mesh.n_cells):
            out[space.cell_dofs[k]] += space.mesh.cell_detjac[k] * (
                phi @ (wts * vals[k]))
        return out[space.free_index]

    def max_abs(self):
        return float(np.abs(self.values()).max())


def time_mean_rhs(func, partition, space, time_points=16):
    """Per-interval temporal mean of f, projected elementwise to P_p.

    `func(points, t)` evaluates the source at spatial points for a fixed
    time.  Polynomial-in-time sources are integrated exactly; everything
    else by composite Gauss with `time_points` points per interval.
    """
    tq, tw = gauss_interval(2 * time_points - 1)
    out = []
    for n in range(partition.n_steps):
        t0 = partition.nodes[n]
        tau = partition.steps[n]
        times = t0 + tau * tq

        def mean(points, _times=times, _tw=tw):
            acc = np.zeros(len(points))
            for t, w in zip(_times, _tw):
                acc += w * np.asarray(func(points, t), dtype=float)
            return acc

        out.append(CellFunction.project(space, mean))
    return out


class TimeSlabSolution:
    """Implicit Euler node values together with the discrete source."""

    def __init__(self, system, partition, node_values, load_vectors,
                 rhs_cell=None):
        self.system = system
        self.partition = partition
        self.node_values = np.asarray(node_values, dtype=float)
        self.load_vectors = load_vectors
        self.rhs_cell = rhs_cell
        if self.node_values.shape != (partition.n_steps + 1, system.dim):
            raise ValueError("node value array has wrong shape")


def implicit_euler_run(system, partition, rhs, u0):
    """March (M/tau + A) u_n = M u_{n-1}/tau + b_n over the partition.

    `rhs` is a sequence of N load vectors (free dofs) or `CellFunction`s.
    """
    if len(rhs) != partition.n_steps:
        raise ValueError("need one rhs entry per time interval")
    rhs_cell = None
    if rhs and isinstance(rhs[0], CellFunction):
        rhs_cell = list(rhs)
        rhs = [g.load_vector() for g in rhs_cell]
    u0 = np.asarray(u0, dtype=float)
    values = np.empty((partition.n_steps + 1, system.dim))
    values[0] = u0
    for n, (tau, b) in enumerate(zip(partition.steps, rhs), start=1):
        op = system.step_operator(tau)
        values[n] = solve_spd(op, system.mass.apply(values[n - 1]) / tau + b)
    return TimeSlabSolution(system, partition, values, list(rhs), rhs_cell)


PROFILES = ("constant_left_continuous", "continuous_affine", "average")


class SpaceTimeFunction:
    """Node coefficient vectors with a temporal profile tag.

    constant_left_continuous is u_tau: the node-n vector on
    (t_{n-1}, t_n], node-0 at t = 0.  continuous_affine is U_tau, linear
    interpolation of the node values.  average is their mean pointwise
    in time.
    """

    def __init__(self, system, partition, node_values, profile):
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        self.system = system
        self.partition = partition
        self.node_values = np.asarray(node_values, dtype=float)
        self.profile = profile

    def at_time(self, t):
        """Coefficient vector of the profile at time t."""
        p = self.partition
        if abs(t) < 1e-15:
            return self.node_values[0].copy()
        n = p.interval_of(t)
        un, um = self.node_values[n], self.node_values[n - 1]
        if self.profile == "constant_left_continuous":
            return un.copy()
        theta = (t - p.nodes[n - 1]) / p.steps[n - 1]
        affine = theta * un + (1.0 - theta) * um
        if self.profile == "continuous_affine":
            return affine
        return 0.5 * (un + affine)

    def time_derivative(self, n):
        """Weak time derivative on interval n (1-based); constant there."""
        tau = self.partition.steps[n - 1]
        d = (self.node_values[n] - self.node_values[n - 1]) / tau
        if self.profile == "constant_left_continuous":
            raise ValueError("piecewise constant profile has no weak derivative")
        if self.profile == "continuous_affine":
            return d
        return 0.5 * d

    def endpoints(self, n):
        """Coefficient vectors of the profile at t_{n-1}^+ and t_n^-."""
        un, um = self.node_values[n], self.node_values[n - 1]
        if self.profile == "constant_left_continuous":
            left = un.copy()
        elif self.profile == "continuous_affine":
            left = um.copy()
        else:
            left = 0.5 * (un + um)
        return left, un.copy()

    def initial_value(self):
        return self.node_values[0]

    def final_value(self):
        return self.node_values[-1]

    def scaled(self, factor):
        return SpaceTimeFunction(self.system, self.partition,
                                 factor * self.node_values, self.profile)

    def __add__(self, other):
        if other.profile != self.profile or other.partition is not self.partition:
            raise ValueError("can only add functions with matching layout")
        return SpaceTimeFunction(self.system, self.partition,
                                 self.node_values + other.node_values,
                                 self.profile)

    def __sub__(self, other):
        return self + other.scaled(-1.0)


class IntervalAffineFunction:
    """Function that is affine on each interval but may jump at the
    nodes, stored by one-sided endpoint traces per interval.

    Used for differences of reconstructions embedded into a finer time
    grid; supports the time-discontinuous norm kinds (X, energy)."""

    profile = "interval_affine"

    def __init__(self, system, partition, lefts, rights):
        self.system = system
        self.partition = partition
        self.lefts = np.asarray(lefts, dtype=float)
        self.rights = np.asarray(rights, dtype=float)
        shape = (partition.n_steps, system.dim)
        if self.lefts.shape != shape or self.rights.shape != shape:
            raise ValueError("endpoint arrays have wrong shape")

    def endpoints(self, n):
        return self.lefts[n - 1], self.rights[n - 1]

    def time_derivative(self, n):
        return (self.rights[n - 1] - self.lefts[n - 1]) / self.partition.steps[n - 1]

    def initial_value(self):
        return self.lefts[0]

    def final_value(self):
        return self.rights[-1]


def reconstruct(sol, profile):
    """Extend the node values of a run to a function on (0, T)."""
    return SpaceTimeFunction(sol.system, sol.partition, sol.node_values,
                             profile)


def temporal_interpolant(v):
    """The interpolation operator onto continuous piecewise-affine time
    profiles; fixes affine inputs and maps the left-continuous
    reconstruction to the affine one."""
    if v.profile == "average":
        raise ValueError("interpolant is defined for the one-sided profiles")
    return SpaceTimeFunction(v.system, v.partition, v.node_values,
                             "continuous_affine")


class ModalProblem:
    """Single decaying mode: u' + lambda u = forcing, u(0) = 0."""

    def __init__(self, decay_rate, forcing=1.0, partition=None):
        if decay_rate <= 0:
            raise ValueError("decay rate must be positive")
        self.decay_rate = float(decay_rate)
        self.forcing = float(forcing)
        self.partition = partition or TimePartition.uniform(1, 1.0)

    def exact(self, t):
        lam = self.decay_rate
        return self.forcing * (1.0 - np.exp(-lam * np.asarray(t))) / lam


def modal_solve(problem):
    """Run the one-dof implicit Euler instance of a modal problem.

    Returns the solution object and the exact-solution evaluator.
    """
    system = DiscreteSystem.modal(problem.decay_rate)
    rhs = [np.array([problem.forcing]) for _ in range(problem.partition.n_steps)]
    sol = implicit_euler_run(system, problem.partition, rhs,
                             np.zeros(1))
    return sol, problem.exact
