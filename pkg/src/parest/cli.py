"""Experiment runner: flat key=value configs in, CSV/JSON reports out.

One experiment per process.  Exit codes: 0 all assertions passed,
1 an assertion failed, 2 the config could not be parsed or validated.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__

EXPERIMENTS = ("identity_suite", "convergence_study", "estimator_report",
               "inefficiency_study", "hypercircle_check")

SCHEMA = """\
# parest experiment configuration: one `key = value` per line,
# `#` starts a comment.  Unknown keys are rejected.

experiment = identity_suite   # one of: %s

# problem selection
problem.kind = fourier_1d     # fourier_1d | fourier_2d | polynomial_in_time | modal
problem.params =              # comma-separated numbers:
                              #   fourier_1d: mode, decay
                              #   fourier_2d: mode_x, mode_y, decay
                              #   polynomial_in_time: (none)
                              #   modal: list of decay rates lambda

# spatial discretization (ignored for modal problems)
mesh.dim = 1                  # 1 | 2
mesh.resolution = 16          # cells per direction
mesh.degree = 1               # polynomial degree p

# temporal discretization
time.steps = 8                # number of implicit Euler steps N
time.grading = uniform        # uniform only

# estimator machinery
flux.degree =                 # flux reconstruction degree (default p+1)
lift.refine = 2               # Riesz lift mesh refinement factor
reference.space_refine = 4    # reference grid factors
reference.time_refine = 4

# per-experiment knobs
convergence.levels = 4        # refinement levels of a convergence study
identity.samples = 20         # random functions in the identity suite
identity.seed = 0

# output
output.dir = .                # directory for manifest and CSV
output.prefix =               # file name prefix (default: experiment name)
threads = 1                   # BLAS threads; env PAREST_THREADS overrides
""" % " | ".join(EXPERIMENTS)

_KNOWN_KEYS = {
    "experiment", "problem.kind", "problem.params", "mesh.dim",
    "mesh.resolution", "mesh.degree", "time.steps", "time.grading",
    "flux.degree", "lift.refine", "reference.space_refine",
    "reference.time_refine", "convergence.levels", "identity.samples",
    "identity.seed", "output.dir", "output.prefix", "threads",
}


class ConfigError(Exception):
    pass


def parse_config(path):
    """Parse a flat key=value config file with line diagnostics."""
    values = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, "
                              f"got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _get(values, key, default=None, cast=str):
    raw = values.get(key, "")
    if raw == "":
        return default
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"config field {key}: cannot parse {raw!r}")


def _float_list(raw):
    return [float(tok) for tok in raw.replace(",", " ").split()]


class ExperimentConfig:
    """Validated experiment settings."""

    def __init__(self, values):
        self.experiment = _get(values, "experiment")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; "
                              f"choose one of {', '.join(EXPERIMENTS)}")
        self.problem_kind = _get(values, "problem.kind", "fourier_1d")
        self.problem_params = _get(values, "problem.params", [], _float_list)
        self.dim = _get(values, "mesh.dim", 1, int)
        if self.dim not in (1, 2):
            raise ConfigError("mesh.dim must be 1 or 2")
        self.resolution = _get(values, "mesh.resolution", 16, int)
        self.degree = _get(values, "mesh.degree", 1, int)
        self.n_steps = _get(values, "time.steps", 8, int)
        if min(self.resolution, self.degree, self.n_steps) < 1:
            raise ConfigError("resolutions, degrees and step counts "
                              "must be positive")
        grading = _get(values, "time.grading", "uniform")
        if grading != "uniform":
            raise ConfigError("time.grading supports only `uniform`")
        self.flux_degree = _get(values, "flux.degree", None, int)
        self.lift_refine = _get(values, "lift.refine", 2, int)
        self.space_refine = _get(values, "reference.space_refine", 4, int)
        self.time_refine = _get(values, "reference.time_refine", 4, int)
        self.levels = _get(values, "convergence.levels", 4, int)
        self.samples = _get(values, "identity.samples", 20, int)
        self.seed = _get(values, "identity.seed", 0, int)
        self.output_dir = _get(values, "output.dir", ".")
        self.prefix = _get(values, "output.prefix", self.experiment)
        self.threads = _get(values, "threads", 1, int)
        env = os.environ.get("PAREST_THREADS")
        if env:
            try:
                self.threads = int(env)
            except ValueError:
                raise ConfigError(f"PAREST_THREADS={env!r} is not an integer")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if self.problem_kind == "modal":
            if self.experiment != "inefficiency_study":
                raise ConfigError("modal problems drive the "
                                  "inefficiency_study experiment only")
        self.echo = dict(values)

    def build_problem(self):
        from .verification import manufactured
        kinds = {"fourier_1d": 2, "fourier_2d": 3, "polynomial_in_time": 0}
        if self.problem_kind not in kinds:
            raise ConfigError(f"unknown problem kind {self.problem_kind!r}")
        expect = kinds[self.problem_kind]
        if len(self.problem_params) != expect:
            raise ConfigError(f"{self.problem_kind} needs {expect} "
                              "problem.params")
        params = self.problem_params
        if self.problem_kind.startswith("fourier"):
            modes = [int(p) for p in params[:-1]]
            if any(m != p for m, p in zip(modes, params)):
                raise ConfigError("fourier mode indices must be integers")
            params = modes + [params[-1]]
        problem = manufactured(self.problem_kind, *params)
        if problem.dim != self.dim:
            raise ConfigError(f"problem dimension {problem.dim} does not "
                              f"match mesh.dim {self.dim}")
        return problem

    def build_mesh(self, resolution=None):
        from .mesh import build_interval_mesh, build_structured_triangle_mesh
        r = resolution or self.resolution
        if self.dim == 1:
            return build_interval_mesh(r)
        return build_structured_triangle_mesh(r, r)


class Manifest:
    """Run record: config echo, timings, tolerances, verdicts."""

    def __init__(self, config):
        self.config = config
        self.assertions = []
        self.timings = {}
        self.tolerances = {}

    def check(self, name, passed, detail):
        if any(a["name"] == name for a in self.assertions):
            raise ValueError(f"duplicate assertion name {name!r}")
        self.assertions.append({"name": name, "passed": bool(passed),
                                "detail": detail})

    def passed(self):
        return all(a["passed"] for a in self.assertions)

    def to_json(self):
        return json.dumps({
            "version": __version__,
            "experiment": self.config.experiment,
            "config": self.config.echo,
            "threads": self.config.threads,
            "tolerances": self.tolerances,
            "timings_seconds": self.timings,
            "assertions": self.assertions,
            "passed": self.passed(),
        }, indent=2, sort_keys=True)


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


# -- experiments ---------------------------------------------------------


def run_identity_suite(config, manifest):
    from .norms import (infsup_identity_residual, make_lift_context,
                        ys_identity_residual)
    from .spaces import ScalarSpace
    from .timestepping import (DiscreteSystem, SpaceTimeFunction,
                               TimePartition)
    tol = 1e-10
    manifest.tolerances["identity_residual"] = tol
    space = ScalarSpace(config.build_mesh(), config.degree)
    system = DiscreteSystem.from_space(space)
    part = TimePartition.uniform(config.n_steps, 1.0)
    ctx = make_lift_context(system)  # lift = trial: identities are exact
    rng = np.random.default_rng(config.seed)
    rows = []
    worst = 0.0
    for i in range(config.samples):
        vals = rng.standard_normal((part.n_steps + 1, system.dim))
        v = SpaceTimeFunction(system, part, vals, "continuous_affine")
        r1 = infsup_identity_residual(v, ctx)
        r2 = ys_identity_residual(v, ctx)
        rows.append([i, r1, r2])
        worst = max(worst, r1, r2)
    manifest.check("identity_residuals", worst <= tol,
                   f"max relative residual {worst:.3e} over "
                   f"{config.samples} samples (tol {tol:g})")
    return ("sample,infsup_residual,ys_residual".split(","), rows)


def run_convergence_study(config, manifest):
    from .equilibration import assemble_flux
    from .estimators import flux_estimator, jump_estimator
    from .norms import make_lift_context
    from .timestepping import reconstruct
    from .verification import exact_error, solve_manufactured
    problem = config.build_problem()
    rows = []
    for level in range(config.levels):
        mesh = config.build_mesh(config.resolution * 2 ** level)
        n_steps = config.n_steps * 2 ** level
        sol = solve_manufactured(problem, mesh, config.degree, n_steps)
        flux = assemble_flux(sol, degree=config.flux_degree)
        ctx = make_lift_context(sol.system, refine=config.lift_refine)
        u_tau = reconstruct(sol, "constant_left_continuous")
        U = reconstruct(sol, "continuous_affine")
        err_x = exact_error(problem, u_tau, "X")
        err_y = exact_error(problem, U, "Y", ctx)
        err_e = exact_error(problem, u_tau, "energy")
        eta_j, _ = jump_estimator(sol)
        eta_f, _ = flux_estimator(sol, flux, "affine")
        h = float(mesh.cell_diameters.max())
        tau = float(sol.partition.steps.max())
        rows.append([h, tau, err_x, err_y, err_e, eta_j, eta_f,
                     eta_j / err_x, eta_f / err_y, eta_j / err_e])
    for j, name in ((2, "error_X"), (3, "error_Y"), (4, "error_E")):
        vals = [r[j] for r in rows]
        mono = all(b < a for a, b in zip(vals, vals[1:]))
        manifest.check(f"{name}_monotone", mono,
                       f"{name} decreases across levels: "
                       + ", ".join(f"{v:.4e}" for v in vals))
    header = ("h,tau,error_X,error_Y,error_E,eta_J,eta_F,"
              "effectivity_X,effectivity_Y,effectivity_E").split(",")
    return (header, rows)


def run_estimator_report(config, manifest):
    from .equilibration import assemble_flux, equilibration_residual
    from .estimators import estimator_report
    from .norms import make_lift_context
    from .verification import solve_manufactured
    problem = config.build_problem()
    mesh = config.build_mesh()
    sol = solve_manufactured(problem, mesh, config.degree, config.n_steps)
    flux = assemble_flux(sol, degree=config.flux_degree)
    ctx = make_lift_context(sol.system, refine=config.lift_refine)
    report = estimator_report(sol, flux=flux, ctx=ctx, f=problem.forcing)
    equil_tol, local_tol = 1e-9, 1e-12
    manifest.tolerances["equilibration_residual"] = equil_tol
    manifest.tolerances["localization_defect"] = local_tol
    res = equilibration_residual(flux, sol)
    manifest.check("equilibration", res <= equil_tol,
                   f"normalized max divergence defect {res:.3e}")
    defect = report.localization_defect()
    manifest.check("localization", defect <= local_tol,
                   f"worst relative localization gap {defect:.3e}")
    local_j = report.localized["eta_J"]
    local_f = report.localized["eta_F"]
    local_osc = report.localized.get("osc_X_bound")
    if local_osc is None:
        local_osc = np.zeros_like(local_j)
    rows = []
    for n in range(local_j.shape[0]):
        for c in range(local_j.shape[1]):
            rows.append([c, n + 1, local_j[n, c], local_f[n, c],
                         local_osc[n, c]])
    return ("cell_id,interval_index,eta_J_sq,eta_F_sq,osc_sq".split(","),
            rows)


def run_inefficiency_study(config, manifest):
    from .estimators import inefficiency_study
    lams = config.problem_params
    if not lams:
        lams = [10.0 ** k for k in range(-3, 4)]
    try:
        rows_d = inefficiency_study(lams)
        monotone = True
    except AssertionError:
        rows_d = inefficiency_study(sorted(lams))
        monotone = False
    manifest.check("ratio_strictly_decreasing", monotone,
                   "error ratio u_tau/U_tau strictly decreasing in lambda")
    tail_tol = 0.1
    manifest.tolerances["tail_efficiency"] = tail_tol
    by_lam = {r["lambda"]: r for r in rows_d}
    hi, lo = max(by_lam), min(by_lam)
    manifest.check("u_tau_superior_at_large_lambda",
                   by_lam[hi]["eff_ut"] <= tail_tol,
                   f"|u-u_tau|_X/eta_J = {by_lam[hi]['eff_ut']:.4f} "
                   f"at lambda={hi:g}")
    manifest.check("U_tau_superior_at_small_lambda",
                   by_lam[lo]["eff_Ut"] <= tail_tol,
                   f"|u-U_tau|_X/eta_J = {by_lam[lo]['eff_Ut']:.4f} "
                   f"at lambda={lo:g}")
    header = ["lambda", "error_ut_X", "error_Ut_X", "eta_J",
              "ratio_ut_over_Ut", "eff_ut", "eff_Ut"]
    rows = [[r[k] for k in header] for r in rows_d]
    return (header, rows)


def run_hypercircle_check(config, manifest):
    from .estimators import jump_estimator
    from .spaces import ScalarSpace, l2_projection
    from .timestepping import (CellFunction, DiscreteSystem, TimePartition,
                               implicit_euler_run, reconstruct)
    from .verification import reference_for_discrete
    tol = 0.02
    manifest.tolerances["hypercircle_residual"] = tol
    problem = config.build_problem()
    space = ScalarSpace(config.build_mesh(), config.degree)
    system = DiscreteSystem.from_space(space)
    part = TimePartition.uniform(config.n_steps, problem.final_time)
    # freeze the source at t=0 so it is constant in time, and use smooth
    # projected initial data: both are requirements of the exact
    # Pythagoras identity regime
    f0 = CellFunction.project(space, lambda x: problem.forcing(x, 0.0))
    rhs = [f0] * part.n_steps
    u0 = l2_projection(space, problem.initial, mass=system.mass)
    sol = implicit_euler_run(system, part, rhs, u0)
    eta_j, _ = jump_estimator(sol)
    ref = reference_for_discrete(sol, config.space_refine,
                                 config.time_refine)
    e1 = ref.error_of(reconstruct(sol, "constant_left_continuous"), "energy")
    e2 = ref.error_of(reconstruct(sol, "continuous_affine"), "energy")
    residual = abs(e1 ** 2 + e2 ** 2 - eta_j ** 2) / eta_j ** 2
    manifest.check("hypercircle_identity", residual <= tol,
                   f"|err_ut^2 + err_Ut^2 - eta_J^2|/eta_J^2 = "
                   f"{residual:.4e}")
    header = ["error_ut_E", "error_Ut_E", "eta_J", "residual"]
    return (header, [[e1, e2, eta_j, residual]])


_RUNNERS = {
    "identity_suite": run_identity_suite,
    "convergence_study": run_convergence_study,
    "estimator_report": run_estimator_report,
    "inefficiency_study": run_inefficiency_study,
    "hypercircle_check": run_hypercircle_check,
}


def run_experiment(config):
    """Execute one experiment; returns (manifest, csv_path, json_path)."""
    manifest = Manifest(config)
    t0 = time.perf_counter()
    header, rows = _RUNNERS[config.experiment](config, manifest)
    manifest.timings["experiment"] = time.perf_counter() - t0
    os.makedirs(config.output_dir, exist_ok=True)
    csv_path = os.path.join(config.output_dir, config.prefix + ".csv")
    json_path = os.path.join(config.output_dir, config.prefix + ".json")
    t0 = time.perf_counter()
    write_csv(csv_path, header, rows)
    manifest.timings["report"] = time.perf_counter() - t0
    with open(json_path, "w") as fh:
        fh.write(manifest.to_json() + "\n")
    return manifest, csv_path, json_path


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="parest",
        description="heat-equation a posteriori estimator experiments")
    sub = parser.add_subparsers(dest="command")
    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("config_path")
    sub.add_parser("list-experiments", help="list experiment kinds")
    sub.add_parser("schema", help="print the config schema")
    args = parser.parse_args(argv)
    if args.command == "list-experiments":
        for name in EXPERIMENTS:
            print(name)
        return 0
    if args.command == "schema":
        print(SCHEMA, end="")
        return 0
    if args.command != "run":
        parser.print_help()
        return 2
    try:
        config = ExperimentConfig(parse_config(args.config_path))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=config.threads)
    except ImportError:
        limiter = None
    try:
        manifest, csv_path, json_path = run_experiment(config)
    finally:
        if limiter is not None:
            limiter.unregister()
    for entry in manifest.assertions:
        verdict = "PASS" if entry["passed"] else "FAIL"
        print(f"{verdict} {entry['name']}: {entry['detail']}")
    print(f"wrote {csv_path} and {json_path}")
    return 0 if manifest.passed() else 1


if __name__ == "__main__":
    sys.exit(main())
