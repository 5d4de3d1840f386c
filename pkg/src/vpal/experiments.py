"""Experiment drivers behind the command line: single solves, comparisons, sweeps."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .problems import ProblemInstance, relative_error, relative_residual
from .solver import SolveResult, SolverDivergence, SolverOptions, admm_solve, vpal_solve

SOLVERS = {"vpal": vpal_solve, "admm": admm_solve}

HISTORY_FIELDS = ("k", "objective", "relative_error", "relative_residual", "forward_count", "adjoint_count")
COMPARE_FIELDS = (
    "solver",
    "outer_iterations",
    "inner_iterations",
    "forward_count",
    "adjoint_count",
    "total_matvecs",
    "objective",
    "relative_error",
    "relative_residual",
    "converged",
    "termination",
    "relative_difference",
    "matvec_ratio",
)
SWEEP_FIELDS = (
    "i_mu",
    "i_lambda",
    "mu",
    "lambda",
    "gamma",
    "relative_error",
    "chi2_departure",
    "outer_iterations",
    "converged",
    "min_error",
    "min_chi2",
)


def write_csv(path, fields: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row[f]) for f in fields])


def _fmt(value):
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ""
    if value is None:
        return ""
    return value


def history_rows(result: SolveResult):
    errors = result.error_history
    for k in range(len(result.objective_history)):
        yield {
            "k": k,
            "objective": result.objective_history[k],
            "relative_error": errors[k] if errors is not None else None,
            "relative_residual": result.residual_history[k],
            "forward_count": result.forward_history[k],
            "adjoint_count": result.adjoint_history[k],
        }


def chi2_departure(problem: ProblemInstance, x, mu: float) -> float:
    """``|F(mu, lam) / (m sigma^2) - 1|`` at the solution ``x``."""
    r = problem.A.forward(x) - problem.b
    F = float(r @ r) + mu * float(np.abs(problem.D.forward(x)).sum())
    return abs(F / (problem.m * problem.sigma**2) - 1.0)


def compare_solvers(problem: ProblemInstance, opts: SolverOptions):
    """Run both solvers on one instance; returns ``(rows, results)``."""
    results = {name: fn(problem, opts) for name, fn in SOLVERS.items()}
    xv, xa = results["vpal"].x_hat, results["admm"].x_hat
    diff = float(np.linalg.norm(xa - xv) / np.linalg.norm(xv)) if np.any(xv) else float("nan")
    ratio = results["admm"].matvecs.total / max(results["vpal"].matvecs.total, 1)
    rows = []
    for name, res in results.items():
        rows.append(
            {
                "solver": name,
                "outer_iterations": res.outer_iterations,
                "inner_iterations": res.total_inner_iterations,
                "forward_count": res.matvecs.forward_count,
                "adjoint_count": res.matvecs.adjoint_count,
                "total_matvecs": res.matvecs.total,
                "objective": res.final_objective,
                "relative_error": res.error_history[-1] if res.error_history else None,
                "relative_residual": res.residual_history[-1],
                "converged": res.converged,
                "termination": res.termination_reason,
                "relative_difference": diff,
                "matvec_ratio": float(ratio),
            }
        )
    return rows, results


def log_grid(lo: float, hi: float, count: int) -> np.ndarray:
    if count == 1:
        return np.array([lo])
    return np.logspace(math.log10(lo), math.log10(hi), count)


def sweep(
    problem: ProblemInstance,
    mus: Sequence[float],
    lams: Sequence[float],
    base: SolverOptions,
    solver: str = "vpal",
    jobs: int = 1,
):
    """Solve on the ``mus x lams`` grid. Rows come back in grid order."""
    fn = SOLVERS[solver]
    points = [(i, j, float(mu), float(lam)) for i, mu in enumerate(mus) for j, lam in enumerate(lams)]

    def run(point):
        i, j, mu, lam = point
        opts = SolverOptions(**{**vars(base), "mu": mu, "lam": lam})
        row = {"i_mu": i, "i_lambda": j, "mu": mu, "lambda": lam, "gamma": opts.gamma}
        try:
            res = fn(problem, opts)
        except SolverDivergence:
            row.update(relative_error=None, chi2_departure=None, outer_iterations=None, converged=False)
            return row
        row.update(
            relative_error=relative_error(res.x_hat, problem.x_true) if problem.x_true is not None else None,
            chi2_departure=chi2_departure(problem, res.x_hat, mu),
            outer_iterations=res.outer_iterations,
            converged=res.converged,
        )
        return row

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run, points))
    else:
        rows = [run(p) for p in points]
    _flag_min(rows, "relative_error", "min_error")
    _flag_min(rows, "chi2_departure", "min_chi2")
    return rows


def _flag_min(rows, key, flag):
    values = [r[key] if r[key] is not None else math.inf for r in rows]
    best = int(np.argmin(values)) if rows else -1
    for idx, row in enumerate(rows):
        row[flag] = idx == best and math.isfinite(values[best])


def final_metrics(problem: ProblemInstance, x) -> dict:
    out = {"relative_residual": relative_residual(x, problem.A, problem.b)}
    if problem.x_true is not None:
        out["relative_error"] = relative_error(x, problem.x_true)
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
