"""Regularization-parameter selection by logarithmic bisection.

``bisect_mu`` seeks ``mu`` with ``F(mu) = ||A x(mu) - b||^2 + mu ||D x(mu)||_1``
equal to ``eta * p * sigma^2`` while the shrinkage level ``gamma`` stays
fixed (so ``lam = sqrt(mu / gamma)`` moves with ``mu``). ``bisect_lambda``
applies the discrepancy principle to ``lam`` at fixed ``mu``.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .linops import LinearOperator
from .solver import SolveResult, SolverOptions, vpal_solve

# rules checked in this order: interval_rel, statistic_flat, interval_abs, eval_budget
TERMINATIONS = ("interval_rel", "statistic_flat", "interval_abs", "eval_budget", "bracket_failure")
MAX_BRACKET_EXPONENT = 8


class DegenerateData(ValueError):
    """The data carry no spread under D, so no MAP scale can be estimated."""


@dataclass
class Chi2Config:
    sigma: float
    gamma: float = 0.1
    dof: Optional[int] = None  # defaults to m
    eta: float = 1.0
    tau1: float = 0.01
    tau2: float = 0.02
    max_evals: int = 10
    bracket_exponent: float = 1.0
    warm_start: bool = False
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(mu=1.0, lam=1.0))

    def __post_init__(self):
        for name in ("sigma", "gamma", "eta", "tau1", "tau2", "bracket_exponent"):
            value = getattr(self, name)
            if not value > 0 or not math.isfinite(value):
                raise ValueError(f"{name} must be positive, got {value}")
        if self.dof is not None and self.dof < 1:
            raise ValueError("dof must be a positive integer")
        if self.max_evals < 2:
            raise ValueError("max_evals must be >= 2")

    def target(self, m: int) -> float:
        """``eta * p * sigma^2``."""
        return self.eta * (self.dof or m) * self.sigma**2


@dataclass
class Evaluation:
    parameter: float
    statistic: float  # F(mu) or H(lam)
    offset: float  # signed distance from the target, the bisected function
    mu: float
    lam: float
    result: SolveResult = field(repr=False)


@dataclass
class BisectionOutcome:
    selected: float
    evaluations: list
    termination: str
    bracket: tuple
    target: float
    selected_evaluation: Optional[Evaluation] = None

    @property
    def n_evals(self) -> int:
        return len(self.evaluations)


def estimate_mu_map(b, D: LinearOperator, sigma: float):
    """Laplace-prior MAP estimate ``mu = sigma^2 / beta`` with ``beta = std(Db)/sqrt(2)``.

    Returns ``(mu_map, beta)``; the standard deviation uses ``ddof=1``.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    b = np.asarray(b, dtype=float)
    if b.shape != (D.cols,):
        raise DegenerateData(f"D expects vectors of length {D.cols}, data has {b.size}")
    Db = D.forward(b)
    if Db.size < 2:
        raise DegenerateData("D b needs at least two entries")
    beta = float(np.std(Db, ddof=1)) / math.sqrt(2.0)
    if beta == 0.0:
        raise DegenerateData("D b is constant")
    return sigma**2 / beta, beta


def chi2_statistic(problem, gamma: float, mu: float, solver_opts: SolverOptions, x0=None):
    """Solve at ``(mu, sqrt(mu/gamma))`` and return ``(F(mu), result)``."""
    if not mu > 0 or not gamma > 0:
        raise ValueError("mu and gamma must be positive")
    opts = dataclasses.replace(solver_opts, mu=mu, lam=math.sqrt(mu / gamma))
    result = vpal_solve(problem, opts, x0=x0)
    x = result.x_hat
    r = problem.A.forward(x) - problem.b
    F = float(r @ r) + mu * float(np.abs(problem.D.forward(x)).sum())
    return F, result


def discrepancy_statistic(
    problem,
    mu_fixed: float,
    lam: float,
    solver_opts: SolverOptions,
    sigma: Optional[float] = None,
    dof: Optional[int] = None,
    eta: float = 1.0,
    x0=None,
):
    """``H(lam) = ||A x(lam) - b||^2 / (eta p sigma^2) - 1``; returns ``(H, result)``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    sigma = problem.sigma if sigma is None else sigma
    opts = dataclasses.replace(solver_opts, mu=mu_fixed, lam=lam)
    result = vpal_solve(problem, opts, x0=x0)
    r = problem.A.forward(result.x_hat) - problem.b
    return float(r @ r) / (eta * (dof or problem.m) * sigma**2) - 1.0, result


def _log_bisect(
    evaluate: Callable[[float, Optional[np.ndarray]], Evaluation],
    lo: float,
    hi: float,
    widen: Callable[[int], tuple],
    config: Chi2Config,
    flat_scale: float,
    target: float,
) -> BisectionOutcome:
    """Bracket a sign change of ``offset`` then bisect at geometric midpoints."""
    evals: list = []
    x_last = None

    def run(param):
        nonlocal x_last
        ev = evaluate(param, x_last if config.warm_start else None)
        x_last = ev.result.x_hat
        evals.append(ev)
        return ev

    def finish(reason, a, b):
        pick = min((a, b), key=lambda e: abs(e.offset))
        return BisectionOutcome(pick.parameter, evals, reason, (a.parameter, b.parameter), target, pick)

    q = 0
    e_lo = run(lo)
    e_hi = run(hi)
    while not (e_lo.offset < 0.0 < e_hi.offset):
        q += 1
        new = widen(q)
        if new is None:
            return finish("bracket_failure", e_lo, e_hi)
        if e_lo.offset >= 0.0:
            if len(evals) >= config.max_evals:
                return finish("eval_budget", e_lo, e_hi)
            e_lo = run(new[0])
        if e_hi.offset <= 0.0:
            if len(evals) >= config.max_evals:
                return finish("eval_budget", e_lo, e_hi)
            e_hi = run(new[1])

    while True:
        a, b = e_lo.parameter, e_hi.parameter
        if b - a < config.tau2 * (1.0 + abs(a)):
            return finish("interval_rel", e_lo, e_hi)
        if abs(e_hi.offset - e_lo.offset) < config.tau2 * flat_scale:
            return finish("statistic_flat", e_lo, e_hi)
        if b - a < config.tau1:
            return finish("interval_abs", e_lo, e_hi)
        if len(evals) >= config.max_evals:
            return finish("eval_budget", e_lo, e_hi)
        e_mid = run(math.sqrt(a * b))
        if e_mid.offset < 0.0:
            e_lo = e_mid
        else:
            e_hi = e_mid


def bisect_mu(problem, config: Chi2Config) -> BisectionOutcome:
    """Find ``mu`` with ``F(mu) = eta * p * sigma^2`` at fixed shrinkage ``gamma``.

    The initial bracket is ``[10^-q mu_map, 10^q mu_map]``, widened one decade
    per side at a time up to ``q = 8``. When no MAP estimate exists the
    bracket is ``[1e-8 mu0, mu0]`` with ``mu0 = 2 ||A^T b||_inf``.
    """
    target = config.target(problem.m)

    def evaluate(mu, x0):
        F, result = chi2_statistic(problem, config.gamma, mu, config.solver, x0=x0)
        return Evaluation(mu, F, F - target, mu, math.sqrt(mu / config.gamma), result)

    q0 = config.bracket_exponent
    try:
        centre, _ = estimate_mu_map(problem.b, problem.D, config.sigma)
        lo, hi = 10.0**-q0 * centre, 10.0**q0 * centre

        def widen(step):
            q = q0 + step
            return None if q > MAX_BRACKET_EXPONENT else (10.0**-q * centre, 10.0**q * centre)

    except DegenerateData:
        mu0 = 2.0 * float(np.max(np.abs(problem.A.adjoint(problem.b))))
        lo, hi = 1e-8 * mu0, mu0

        def widen(step):
            if step > MAX_BRACKET_EXPONENT:
                return None
            return 1e-8 * mu0 * 10.0**-step, mu0 * 10.0**step

    return _log_bisect(evaluate, lo, hi, widen, config, target, target)


def bisect_lambda(problem, mu_fixed: float, config: Chi2Config) -> BisectionOutcome:
    """Discrepancy principle on ``lam`` at fixed ``mu``, bracketed around ``sqrt(mu/gamma)``."""
    if not mu_fixed > 0:
        raise ValueError("mu_fixed must be positive")
    p = config.dof or problem.m

    def evaluate(lam, x0):
        H, result = discrepancy_statistic(
            problem, mu_fixed, lam, config.solver, config.sigma, p, config.eta, x0=x0
        )
        return Evaluation(lam, H, H, mu_fixed, lam, result)

    centre = math.sqrt(mu_fixed / config.gamma)
    q0 = config.bracket_exponent

    def widen(step):
        q = q0 + step
        return None if q > MAX_BRACKET_EXPONENT else (10.0**-q * centre, 10.0**q * centre)

    return _log_bisect(evaluate, 10.0**-q0 * centre, 10.0**q0 * centre, widen, config, 1.0, 0.0)
