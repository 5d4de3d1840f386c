"""Command-line front end: ``vpal {solve,compare,sweep,autoselect}``.

Every run is a pure function of its :class:`RunConfig`. A JSON config file
may supply any field; flags given on the command line override it.

Exit codes: 0 success, 1 solver failure, 2 usage error, 3 bracket failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import experiments as ex
from .imageio import write_pgm, write_raw
from .problems import DEFAULT_GEOMETRY, FAMILIES, REGULARIZERS, build_problem, relative_error
from .regselect import Chi2Config, DegenerateData, bisect_lambda, bisect_mu, estimate_mu_map
from .solver import DegenerateDirection, SolverDivergence, SolverOptions

EXIT_OK, EXIT_SOLVER, EXIT_USAGE, EXIT_BRACKET = 0, 1, 2, 3
COMMANDS = ("solve", "compare", "sweep", "autoselect")
DEFAULT_LAMBDA = 0.3

EVAL_FIELDS = ("index", "parameter", "mu", "lambda", "gamma", "statistic", "offset", "outer_iterations", "converged")


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "solve"
    # problem
    problem: str = "denoise"
    size: int = 16
    noise: float = 0.1
    reg: str = "tv"
    seed: int = 0
    geometry: dict = field(default_factory=dict)
    # solver
    solver: str = "vpal"
    mu: Optional[float] = None  # None: data-driven MAP estimate
    gamma: Optional[float] = None
    lam: Optional[float] = None
    tol: float = 1e-4
    max_iter: int = 1000
    step_rule: str = "linearized"
    # sweep
    grid_mu: Optional[str] = None
    grid_lambda: Optional[str] = None
    jobs: int = 1
    # selection
    target: str = "mu"
    sigma: Optional[float] = None
    dof: Optional[int] = None
    eta: float = 1.0
    tau1: float = 0.01
    tau2: float = 0.02
    max_evals: int = 10
    final_solve: bool = True
    # output
    out: str = "out"

    def validate(self) -> "RunConfig":
        choices = {
            "command": COMMANDS,
            "problem": FAMILIES,
            "reg": REGULARIZERS,
            "solver": tuple(ex.SOLVERS),
            "target": ("mu", "lambda"),
            "step_rule": ("linearized", "exact_line_search"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise UsageError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.size < 8:
            raise UsageError("size must be >= 8")
        for name in ("noise", "tol", "eta", "tau1", "tau2"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        for name in ("mu", "gamma", "lam", "sigma"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise UsageError(f"{name} must be positive")
        if self.max_iter < 1 or self.jobs < 1 or self.max_evals < 2:
            raise UsageError("max_iter and jobs must be >= 1, max_evals >= 2")
        if self.dof is not None and self.dof < 1:
            raise UsageError("dof must be >= 1")
        unknown = set(self.geometry) - set(DEFAULT_GEOMETRY)
        if unknown:
            raise UsageError(f"unknown geometry keys: {sorted(unknown)}")
        for grid in (self.grid_mu, self.grid_lambda):
            if grid is not None:
                parse_grid(grid)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise UsageError(f"cannot read config {path}: {err}") from err
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        return cls.from_dict(data)


def parse_grid(text: str):
    """``"lo:hi:count"`` to ``(lo, hi, count)``."""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise UsageError(f"grid must be lo:hi:count, got {text!r}")
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as err:
        raise UsageError(f"grid must be lo:hi:count, got {text!r}") from err
    if not (0 < lo <= hi) or not math.isfinite(hi) or count < 1:
        raise UsageError(f"grid needs 0 < lo <= hi and count >= 1, got {text!r}")
    return lo, hi, count


def _grid_arg(text):
    try:
        parse_grid(text)
    except UsageError as err:
        raise argparse.ArgumentTypeError(str(err)) from err
    return text


def _positive(kind):
    def check(text):
        try:
            value = kind(text)
        except ValueError as err:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}") from err
        if not value > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text!r}")
        return value

    return check


GEOMETRY_FLAGS = {
    "psf_sigma": float,
    "kernel_radius": int,
    "n_angles": int,
    "detectors": int,
    "angle_seed": int,
    "phantom": str,
    "phantom_seed": int,
    "noise_mode": str,
    "intensity": float,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", dest="config_path", help="JSON config file; flags override it")
    common.add_argument("--save-config", help="write the effective config as JSON")
    common.add_argument("--problem", choices=FAMILIES)
    common.add_argument("--size", type=_positive(int), help="image side length")
    common.add_argument("--noise", type=_positive(float), help="relative noise level, 0.1 = 10%%")
    common.add_argument("--reg", choices=REGULARIZERS)
    common.add_argument("--seed", type=int)
    common.add_argument("--solver", choices=tuple(ex.SOLVERS))
    common.add_argument("--mu", type=_positive(float))
    common.add_argument("--gamma", type=_positive(float))
    common.add_argument("--lambda", dest="lam", type=_positive(float))
    common.add_argument("--tol", type=_positive(float))
    common.add_argument("--max-iter", dest="max_iter", type=_positive(int))
    common.add_argument("--step-rule", dest="step_rule", choices=("linearized", "exact_line_search"))
    common.add_argument("--grid-mu", dest="grid_mu", type=_grid_arg, metavar="LO:HI:COUNT")
    common.add_argument("--grid-lambda", dest="grid_lambda", type=_grid_arg, metavar="LO:HI:COUNT")
    common.add_argument("--jobs", type=_positive(int))
    common.add_argument("--target", choices=("mu", "lambda"))
    common.add_argument("--sigma", type=_positive(float))
    common.add_argument("--dof", type=_positive(int))
    common.add_argument("--eta", type=_positive(float))
    common.add_argument("--tau1", type=_positive(float))
    common.add_argument("--tau2", type=_positive(float))
    common.add_argument("--max-evals", dest="max_evals", type=int)
    common.add_argument("--no-final-solve", dest="final_solve", action="store_false")
    common.add_argument("--out", help="output directory")
    for key, kind in GEOMETRY_FLAGS.items():
        common.add_argument("--" + key.replace("_", "-"), dest="geo_" + key, type=kind)

    parser = argparse.ArgumentParser(prog="vpal", description="Generalized lasso solvers and parameter selection.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "solve": "single solve with history CSV and reconstruction",
        "compare": "vpal and admm on the same instance",
        "sweep": "(mu, lambda) grid sweep",
        "autoselect": "chi-squared bisection for mu, or discrepancy bisection for lambda",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], argument_default=argparse.SUPPRESS)
    return parser


def config_from_args(argv) -> tuple:
    """Parse ``argv`` into ``(RunConfig, save_path)``; file values sit under flags."""
    ns = vars(build_parser().parse_args(argv))
    base = RunConfig.load(ns.pop("config_path")) if "config_path" in ns else RunConfig()
    save = ns.pop("save_config", None)
    geo = dict(base.geometry)
    for key in list(ns):
        if key.startswith("geo_"):
            geo[key[4:]] = ns.pop(key)
    cfg = dataclasses.replace(base, **ns, geometry=geo)
    return cfg.validate(), save


# ---------------------------------------------------------------- commands


def _problem(cfg: RunConfig):
    return build_problem(cfg.problem, cfg.size, cfg.noise, cfg.reg, cfg.seed, cfg.geometry)


def _default_mu(problem, sigma) -> float:
    try:
        return estimate_mu_map(problem.b, problem.D, sigma)[0]
    except DegenerateData:
        # no MAP estimate (e.g. tomography data): a small fraction of the lasso-zero level
        return 1e-3 * 2.0 * float(np.max(np.abs(problem.A.adjoint(problem.b))))


def resolve_parameters(cfg: RunConfig, problem) -> tuple:
    """``(mu, lam)`` from whichever of mu / gamma / lambda were given."""
    sigma = cfg.sigma or problem.sigma
    mu = cfg.mu if cfg.mu is not None else _default_mu(problem, sigma)
    if cfg.lam is not None:
        lam = cfg.lam
    elif cfg.gamma is not None:
        lam = math.sqrt(mu / cfg.gamma)
    else:
        lam = DEFAULT_LAMBDA
    return mu, lam


def _solver_options(cfg: RunConfig, mu: float, lam: float) -> SolverOptions:
    return SolverOptions(mu=mu, lam=lam, tol=cfg.tol, max_outer=cfg.max_iter, step_rule=cfg.step_rule)


def _write_image(out: Path, stem: str, x, problem) -> None:
    h = w = problem.descriptor["n_side"]
    write_pgm(out / f"{stem}.pgm", x, h, w, peak=problem.descriptor["intensity"])
    write_raw(out / f"{stem}.f64", x, h, w)


def cmd_solve(cfg: RunConfig) -> int:
    problem = _problem(cfg)
    mu, lam = resolve_parameters(cfg, problem)
    opts = _solver_options(cfg, mu, lam)
    t0 = time.perf_counter()
    result = ex.SOLVERS[cfg.solver](problem, opts)
    elapsed = time.perf_counter() - t0
    out = ex.ensure_dir(cfg.out)
    ex.write_csv(out / "history.csv", ex.HISTORY_FIELDS, ex.history_rows(result))
    _write_image(out, "reconstruction", result.x_hat, problem)
    metrics = ex.final_metrics(problem, result.x_hat)
    print(
        f"{cfg.solver}: mu={mu:.6g} lambda={lam:.6g} outer={result.outer_iterations} "
        f"matvecs={result.matvecs.total} rel_err={metrics.get('relative_error', float('nan')):.6g} "
        f"rel_res={metrics['relative_residual']:.6g} {result.termination_reason} time={elapsed:.3f}s"
    )
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    problem = _problem(cfg)
    mu, lam = resolve_parameters(cfg, problem)
    t0 = time.perf_counter()
    rows, results = ex.compare_solvers(problem, _solver_options(cfg, mu, lam))
    elapsed = time.perf_counter() - t0
    out = ex.ensure_dir(cfg.out)
    ex.write_csv(out / "compare.csv", ex.COMPARE_FIELDS, rows)
    for name, res in results.items():
        ex.write_csv(out / f"history_{name}.csv", ex.HISTORY_FIELDS, ex.history_rows(res))
        _write_image(out, f"reconstruction_{name}", res.x_hat, problem)
    for row in rows:
        print(
            f"{row['solver']}: outer={row['outer_iterations']} inner={row['inner_iterations']} "
            f"matvecs={row['total_matvecs']} rel_err={row['relative_error']:.6g} {row['termination']}"
        )
    print(
        f"relative_difference={rows[0]['relative_difference']:.3g} "
        f"matvec_ratio(admm/vpal)={rows[0]['matvec_ratio']:.3g} time={elapsed:.3f}s"
    )
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    problem = _problem(cfg)
    mu_c, lam_c = resolve_parameters(cfg, problem)
    mus = ex.log_grid(*parse_grid(cfg.grid_mu)) if cfg.grid_mu else ex.log_grid(mu_c / 10, mu_c * 10, 7)
    lams = ex.log_grid(*parse_grid(cfg.grid_lambda)) if cfg.grid_lambda else ex.log_grid(lam_c / 10, lam_c * 10, 5)
    t0 = time.perf_counter()
    rows = ex.sweep(problem, mus, lams, _solver_options(cfg, mu_c, lam_c), cfg.solver, cfg.jobs)
    elapsed = time.perf_counter() - t0
    out = ex.ensure_dir(cfg.out)
    ex.write_csv(out / "sweep.csv", ex.SWEEP_FIELDS, rows)
    best_err = next((r for r in rows if r["min_error"]), None)
    best_chi = next((r for r in rows if r["min_chi2"]), None)
    n_bad = sum(not r["converged"] for r in rows)
    if best_err and best_chi:
        print(
            f"min error {best_err['relative_error']:.6g} at mu={best_err['mu']:.6g} lambda={best_err['lambda']:.6g}; "
            f"min chi2 point error {best_chi['relative_error']:.6g} at mu={best_chi['mu']:.6g} "
            f"lambda={best_chi['lambda']:.6g}"
        )
    print(f"{len(rows)} points, {n_bad} not converged, time={elapsed:.3f}s")
    return EXIT_OK


def cmd_autoselect(cfg: RunConfig) -> int:
    problem = _problem(cfg)
    sigma = cfg.sigma or problem.sigma
    mu_ref, lam_ref = resolve_parameters(cfg, problem)
    gamma = cfg.gamma if cfg.gamma is not None else mu_ref / lam_ref**2
    config = Chi2Config(
        sigma=sigma,
        gamma=gamma,
        dof=cfg.dof,
        eta=cfg.eta,
        tau1=cfg.tau1,
        tau2=cfg.tau2,
        max_evals=cfg.max_evals,
        solver=_solver_options(cfg, mu_ref, lam_ref),
    )
    t0 = time.perf_counter()
    if cfg.target == "mu":
        outcome = bisect_mu(problem, config)
    else:
        outcome = bisect_lambda(problem, mu_ref, config)
    out = ex.ensure_dir(cfg.out)
    rows = [
        {
            "index": k,
            "parameter": ev.parameter,
            "mu": ev.mu,
            "lambda": ev.lam,
            "gamma": ev.mu / ev.lam**2,
            "statistic": ev.statistic,
            "offset": ev.offset,
            "outer_iterations": ev.result.outer_iterations,
            "converged": ev.result.converged,
        }
        for k, ev in enumerate(outcome.evaluations)
    ]
    ex.write_csv(out / "evaluations.csv", EVAL_FIELDS, rows)
    sel = outcome.selected_evaluation
    summary = {
        "target": cfg.target,
        "termination": outcome.termination,
        "n_evals": outcome.n_evals,
        "mu": sel.mu,
        "lambda": sel.lam,
        "gamma": sel.mu / sel.lam**2,
        "statistic": sel.statistic,
        "statistic_target": outcome.target,
        "bracket": list(outcome.bracket),
    }
    if cfg.target == "mu":
        summary["chi2_departure"] = sel.statistic / (problem.m * sigma**2) - 1.0
    if cfg.final_solve and problem.x_true is not None:
        x = sel.result.x_hat
        summary["relative_error"] = relative_error(x, problem.x_true)
        _write_image(out, "reconstruction", x, problem)
    (out / "selection.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    elapsed = time.perf_counter() - t0
    print(
        f"{outcome.termination}: mu={sel.mu:.6g} lambda={sel.lam:.6g} evals={outcome.n_evals} "
        f"statistic={sel.statistic:.6g} target={outcome.target:.6g} time={elapsed:.3f}s"
    )
    return EXIT_BRACKET if outcome.termination == "bracket_failure" else EXIT_OK


HANDLERS = {"solve": cmd_solve, "compare": cmd_compare, "sweep": cmd_sweep, "autoselect": cmd_autoselect}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        cfg, save = config_from_args(argv)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        return _fail("usage", str(err), EXIT_USAGE)
    except SystemExit as err:  # argparse already printed usage
        return int(err.code or 0)
    if save:
        Path(save).write_text(cfg.dumps())
    try:
        return HANDLERS[cfg.command](cfg)
    except (SolverDivergence, DegenerateDirection) as err:
        return _fail("solver", str(err), EXIT_SOLVER)
    except OSError as err:
        return _fail("io", str(err), EXIT_SOLVER)
    except ValueError as err:
        parser.print_usage(sys.stderr)
        return _fail("usage", str(err), EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
