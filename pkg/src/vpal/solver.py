"""Solvers for ``min 1/2 ||Ax - b||^2 + mu ||Dx||_1``.

Two augmented-Lagrangian schemes share the splitting ``y = Dx`` and the
scaled multiplier ``c``:

* :func:`vpal_solve` eliminates ``y`` by shrinkage and takes gradient steps
  on the projected objective (variable projection).
* :func:`admm_solve` alternates an LSQR solve in ``x`` with shrinkage in ``y``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linops import LinearOperator, MatvecCounter, StackedOperator
from .lsqr import lsqr_leastsquares, lsqr_solve

__all__ = [
    "SolverOptions",
    "SolveResult",
    "SolverDivergence",
    "DegenerateDirection",
    "shrink",
    "shrinkage_map",
    "f_joint",
    "f_proj",
    "vpal_gradient",
    "linearized_step",
    "exact_line_search",
    "outer_stop",
    "vpal_solve",
    "admm_solve",
    "lsqr_leastsquares",
]

INNER_MODES = ("single_step", "iterate_to_tol")
STEP_RULES = ("linearized", "exact_line_search")


class SolverDivergence(RuntimeError):
    """An iterate became non-finite."""


class DegenerateDirection(ValueError):
    """The search direction lies in the null space of ``[A; lam D]``."""


@dataclass
class SolverOptions:
    """Parameters of a single solve.

    ``lam`` is the augmented-Lagrangian penalty; the soft-threshold level is
    ``gamma = mu / lam**2``.
    """

    mu: float
    lam: float
    tol: float = 1e-4
    max_outer: int = 1000
    inner_mode: str = "single_step"
    inner_tol: float = 1e-8
    max_inner: int = 100
    admm_inner_max: int = 50
    admm_inner_tol: float = 1e-6
    step_rule: str = "linearized"

    def __post_init__(self):
        if not self.mu >= 0 or not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite and nonnegative, got {self.mu}")
        if not self.lam > 0 or not math.isfinite(self.lam):
            raise ValueError(f"lambda must be finite and positive, got {self.lam}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_outer < 1 or self.max_inner < 1 or self.admm_inner_max < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.inner_mode not in INNER_MODES:
            raise ValueError(f"inner_mode must be one of {INNER_MODES}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}")

    @property
    def gamma(self) -> float:
        return self.mu / self.lam**2

    @classmethod
    def from_gamma(cls, mu: float, gamma: float, **kwargs) -> "SolverOptions":
        """Build options from ``mu`` and a shrinkage level, ``lam = sqrt(mu/gamma)``."""
        if not mu > 0 or not gamma > 0:
            raise ValueError("mu and gamma must be positive")
        return cls(mu=mu, lam=math.sqrt(mu / gamma), **kwargs)


@dataclass
class SolveResult:
    x_hat: np.ndarray
    objective_history: list
    residual_history: list
    error_history: Optional[list]
    outer_iterations: int
    total_inner_iterations: int
    matvecs: MatvecCounter
    matvecs_by_operator: dict
    converged: bool
    termination_reason: str
    y: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    forward_history: list = field(default_factory=list)
    adjoint_history: list = field(default_factory=list)

    @property
    def final_objective(self) -> float:
        return self.objective_history[-1]


def shrink(d: np.ndarray, gamma: float) -> np.ndarray:
    """Soft thresholding ``sign(d) * max(|d| - gamma, 0)``, with ``sign(0) = 0``."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    d = np.asarray(d, dtype=float)
    return np.sign(d) * np.maximum(np.abs(d) - gamma, 0.0)


def shrinkage_map(x, c, D: LinearOperator, gamma: float) -> np.ndarray:
    """Exact minimiser in ``y`` of the joint objective for fixed ``x``."""
    return shrink(D.forward(x) + c, gamma)


def _joint_tail(d_minus_y, y, mu, lam):
    return 0.5 * lam**2 * float(d_minus_y @ d_minus_y) + mu * float(np.abs(y).sum())


def f_joint(x, y, c, A: LinearOperator, D: LinearOperator, b, mu, lam) -> float:
    r = A.forward(x) - b
    return 0.5 * float(r @ r) + _joint_tail(D.forward(x) - y + c, y, mu, lam)


def f_proj(x, c, A: LinearOperator, D: LinearOperator, b, mu, lam) -> float:
    """Joint objective with ``y`` replaced by its shrinkage minimiser."""
    return f_joint(x, shrinkage_map(x, c, D, mu / lam**2), c, A, D, b, mu, lam)


def _proj_tail(d, mu, lam):
    z = shrink(d, mu / lam**2)
    return _joint_tail(d - z, z, mu, lam)


def vpal_gradient(x, y, c, A: LinearOperator, D: LinearOperator, b, lam):
    """Residual of the stacked system and the descent direction ``[A; lam D]^T r``."""
    m = A.rows
    r = np.concatenate([A.forward(x) - b, lam * (D.forward(x) - y + c)])
    g = A.adjoint(r[:m]) + lam * D.adjoint(r[m:])
    return r, g


def _step_from_products(g, Ag, Dg, lam) -> float:
    hh = float(Ag @ Ag) + lam**2 * float(Dg @ Dg)
    if hh == 0.0:
        raise DegenerateDirection("h = [A; lam D] g vanishes")
    return float(g @ g) / hh


def linearized_step(g, A: LinearOperator, D: LinearOperator, lam) -> float:
    """Step ``g^T g / h^T h`` with ``h = [A; lam D] g``."""
    g = np.asarray(g, dtype=float)
    if not np.any(g):
        raise DegenerateDirection("zero direction")
    return _step_from_products(g, A.forward(g), D.forward(g), lam)


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _line_search(r, Ag, d, Dg, mu, lam, alpha_lin, max_doublings=60) -> float:
    """Minimise ``phi(a) = f_proj(x - a g)`` given ``r = Ax - b`` and ``d = Dx + c``."""

    def phi(a):
        rr = r - a * Ag
        return 0.5 * float(rr @ rr) + _proj_tail(d - a * Dg, mu, lam)

    hi = 2.0 * alpha_lin
    for _ in range(max_doublings):
        if phi(hi) >= phi(0.5 * hi):
            break
        hi *= 2.0
    else:
        raise DegenerateDirection("line search bracket kept expanding; direction looks unbounded")

    a, bnd = 0.0, hi
    x1 = bnd - _GOLDEN * (bnd - a)
    x2 = a + _GOLDEN * (bnd - a)
    f1, f2 = phi(x1), phi(x2)
    while bnd - a > 1e-8 * hi:
        if f1 <= f2:
            bnd, x2, f2 = x2, x1, f1
            x1 = bnd - _GOLDEN * (bnd - a)
            f1 = phi(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLDEN * (bnd - a)
            f2 = phi(x2)
    best = x1 if f1 <= f2 else x2
    # never worse than the linearised step
    return best if phi(best) <= phi(alpha_lin) else alpha_lin


def exact_line_search(x, g, c, A: LinearOperator, D: LinearOperator, b, mu, lam) -> float:
    """Step minimising the projected objective along ``-g`` (bracketing + golden section)."""
    g = np.asarray(g, dtype=float)
    if not np.any(g):
        raise DegenerateDirection("zero direction")
    Ag, Dg = A.forward(g), D.forward(g)
    alpha_lin = _step_from_products(g, Ag, Dg, lam)
    return _line_search(A.forward(x) - b, Ag, D.forward(x) + c, Dg, mu, lam, alpha_lin)


def outer_stop(f_prev: float, f_curr: float, x_prev, x_curr, tau: float) -> bool:
    """Both the objective decrease and the step are small relative to ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not f_prev - f_curr <= tau * (1.0 + f_curr):
        return False
    step = float(np.max(np.abs(np.asarray(x_prev) - np.asarray(x_curr)), initial=0.0))
    return step <= math.sqrt(tau) * (1.0 + float(np.max(np.abs(x_curr), initial=0.0)))


class _Tracker:
    """Per-iteration histories shared by both solvers."""

    def __init__(self, problem, mu, counters):
        self.b = problem.b
        self.bnorm = float(np.linalg.norm(problem.b))
        self.x_true = getattr(problem, "x_true", None)
        self.tnorm = float(np.linalg.norm(self.x_true)) if self.x_true is not None else 0.0
        self.mu = mu
        self.counters = counters
        self.objective, self.residual, self.forward, self.adjoint = [], [], [], []
        self.error = [] if self.x_true is not None and self.tnorm > 0 else None

    def record(self, x, Ax, Dx):
        r = Ax - self.b
        rr = float(r @ r)
        self.objective.append(0.5 * rr + self.mu * float(np.abs(Dx).sum()))
        self.residual.append(math.sqrt(rr) / self.bnorm if self.bnorm > 0 else math.sqrt(rr))
        if self.error is not None:
            self.error.append(float(np.linalg.norm(x - self.x_true)) / self.tnorm)
        total = sum(self.counters.values(), MatvecCounter())
        self.forward.append(total.forward_count)
        self.adjoint.append(total.adjoint_count)
        return rr


def _check_dims(problem):
    A, D, b = problem.A, problem.D, np.asarray(problem.b)
    if A.cols != D.cols:
        raise ValueError(f"A has {A.cols} columns but D has {D.cols}")
    if b.shape != (A.rows,):
        raise ValueError(f"b has shape {b.shape}, expected ({A.rows},)")


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise SolverDivergence("non-finite iterate encountered; try a larger lambda")


def _initial_state(problem, x0, y0, c0):
    n, ell = problem.A.cols, problem.D.rows
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    y = np.zeros(ell) if y0 is None else np.array(y0, dtype=float)
    c = np.zeros(ell) if c0 is None else np.array(c0, dtype=float)
    if x.shape != (n,) or y.shape != (ell,) or c.shape != (ell,):
        raise ValueError("initial state has inconsistent dimensions")
    return x, y, c


def _result(x, y, c, tracker, k, inner, counters, converged, reason):
    return SolveResult(
        x_hat=x,
        objective_history=tracker.objective,
        residual_history=tracker.residual,
        error_history=tracker.error,
        outer_iterations=k,
        total_inner_iterations=inner,
        matvecs=sum(counters.values(), MatvecCounter()),
        matvecs_by_operator={name: cnt.snapshot() for name, cnt in counters.items()},
        converged=converged,
        termination_reason=reason,
        y=y,
        c=c,
        forward_history=tracker.forward,
        adjoint_history=tracker.adjoint,
    )


def vpal_solve(problem, opts: SolverOptions, x0=None, y0=None, c0=None) -> SolveResult:
    """Variable projected augmented Lagrangian.

    Each inner step forms the stacked residual, the direction
    ``g = [A; lam D]^T r``, a step length, then re-projects ``y`` by
    shrinkage. With ``inner_mode="single_step"`` exactly one inner step is
    taken per outer iteration. The multiplier update is ``c += Dx - y``.
    """
    _check_dims(problem)
    counters = {"A": MatvecCounter(), "D": MatvecCounter()}
    A = problem.A.counted(counters["A"])
    D = problem.D.counted(counters["D"])
    b = np.asarray(problem.b, dtype=float)
    mu, lam, gamma = opts.mu, opts.lam, opts.gamma
    m = A.rows
    x, y, c = _initial_state(problem, x0, y0, c0)

    tracker = _Tracker(problem, mu, counters)
    if np.any(x):
        Ax, Dx = problem.A.forward(x), problem.D.forward(x)
    else:
        Ax, Dx = np.zeros(m), np.zeros(D.rows)
    tracker.record(x, Ax, Dx)
    f_prev = tracker.objective[-1]

    max_inner = 1 if opts.inner_mode == "single_step" else opts.max_inner
    inner_total = 0
    for k in range(1, opts.max_outer + 1):
        x_start = x
        for _ in range(max_inner):
            Ax = A.forward(x)
            Dx = D.forward(x)
            r_top = Ax - b
            r_bot = lam * (Dx - y + c)
            g = A.adjoint(r_top) + lam * D.adjoint(r_bot)
            inner_total += 1
            if not np.any(g):
                y = shrink(Dx + c, gamma)
                break
            Ag = A.forward(g)
            Dg = D.forward(g)
            try:
                alpha = _step_from_products(g, Ag, Dg, lam)
            except DegenerateDirection:
                y = shrink(Dx + c, gamma)
                break
            if opts.step_rule == "exact_line_search":
                alpha = _line_search(r_top, Ag, Dx + c, Dg, mu, lam, alpha)
            x_new = x - alpha * g
            Ax = Ax - alpha * Ag
            Dx = Dx - alpha * Dg
            y = shrink(Dx + c, gamma)
            step = float(np.max(np.abs(x_new - x)))
            x = x_new
            if step <= opts.inner_tol * (1.0 + float(np.max(np.abs(x)))):
                break
        c = c + Dx - y
        _finite(x, y, c)

        tracker.record(x, Ax, Dx)
        f_curr = tracker.objective[-1]
        if outer_stop(f_prev, f_curr, x_start, x, opts.tol):
            return _result(x, y, c, tracker, k, inner_total, counters, True, "converged")
        f_prev = f_curr
    return _result(x, y, c, tracker, opts.max_outer, inner_total, counters, False, "max_outer")


def admm_solve(problem, opts: SolverOptions, x0=None, y0=None, c0=None) -> SolveResult:
    """Alternating direction method of multipliers with a warm-started LSQR x-step."""
    _check_dims(problem)
    counters = {"A": MatvecCounter(), "D": MatvecCounter()}
    A = problem.A.counted(counters["A"])
    D = problem.D.counted(counters["D"])
    b = np.asarray(problem.b, dtype=float)
    mu, lam, gamma = opts.mu, opts.lam, opts.gamma
    stacked = StackedOperator(A, D, lam)
    x, y, c = _initial_state(problem, x0, y0, c0)

    tracker = _Tracker(problem, mu, counters)
    if np.any(x):
        Ax, Dx = problem.A.forward(x), problem.D.forward(x)
    else:
        Ax, Dx = np.zeros(A.rows), np.zeros(D.rows)
    tracker.record(x, Ax, Dx)
    f_prev = tracker.objective[-1]

    inner_total = 0
    for k in range(1, opts.max_outer + 1):
        x_prev = x
        rhs = np.concatenate([b, lam * (y - c)])
        info = lsqr_solve(stacked, rhs, x0=x, tol=opts.admm_inner_tol, max_iter=opts.admm_inner_max)
        inner_total += info.iterations
        x = info.x
        Dx = D.forward(x)
        Ax = A.forward(x)
        y = shrink(Dx + c, gamma)
        c = c + Dx - y
        _finite(x, y, c)

        tracker.record(x, Ax, Dx)
        f_curr = tracker.objective[-1]
        if outer_stop(f_prev, f_curr, x_prev, x, opts.tol):
            return _result(x, y, c, tracker, k, inner_total, counters, True, "converged")
        f_prev = f_curr
    return _result(x, y, c, tracker, opts.max_outer, inner_total, counters, False, "max_outer")
