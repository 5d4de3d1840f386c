"""LSQR (Paige & Saunders) for matrix-free least squares with a warm start."""
from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from .linops import LinearOperator


class LsqrInfo(NamedTuple):
    x: np.ndarray
    iterations: int
    normal_residual: float
    converged: bool


def lsqr_solve(
    op: LinearOperator,
    rhs: np.ndarray,
    x0: Optional[np.ndarray] = None,
    tol: float = 1e-6,
    max_iter: int = 50,
) -> LsqrInfo:
    """Minimise ``||op x - rhs||`` starting from ``x0``.

    Stops once the estimated normal-equation residual satisfies
    ``||op^T (op x - rhs)|| <= tol * ||op^T rhs||`` or after ``max_iter``
    bidiagonalisation steps. Each step costs one forward and one adjoint.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    rhs = np.asarray(rhs, dtype=float)
    if x0 is None or not np.any(x0):
        x = np.zeros(op.cols)
        r = rhs.copy()
    else:
        x = np.array(x0, dtype=float)
        r = rhs - op.forward(x)

    beta = np.linalg.norm(r)
    if beta == 0.0:
        return LsqrInfo(x, 0, 0.0, True)
    u = r / beta
    v = op.adjoint(u)
    alpha = np.linalg.norm(v)
    if x0 is None or not np.any(x0):
        ref = alpha * beta
    else:
        ref = np.linalg.norm(op.adjoint(rhs))
    arnorm = alpha * beta
    if arnorm <= tol * ref or alpha == 0.0:
        return LsqrInfo(x, 0, arnorm, True)
    v = v / alpha
    w = v.copy()
    phibar, rhobar = beta, alpha

    for it in range(1, max_iter + 1):
        u = op.forward(v) - alpha * u
        beta = np.linalg.norm(u)
        if beta > 0:
            u /= beta
        v = op.adjoint(u) - beta * v
        alpha = np.linalg.norm(v)
        if alpha > 0:
            v /= alpha

        rho = np.hypot(rhobar, beta)
        c = rhobar / rho
        s = beta / rho
        theta = s * alpha
        rhobar = -c * alpha
        phi = c * phibar
        phibar = s * phibar

        x += (phi / rho) * w
        w = v - (theta / rho) * w

        arnorm = phibar * alpha * abs(c)
        if arnorm <= tol * ref:
            return LsqrInfo(x, it, arnorm, True)
    return LsqrInfo(x, max_iter, arnorm, False)


def lsqr_leastsquares(
    op: LinearOperator,
    rhs: np.ndarray,
    x0: Optional[np.ndarray] = None,
    tol: float = 1e-6,
    max_iter: int = 50,
) -> np.ndarray:
    """Approximate ``argmin ||op x - rhs||``; see :func:`lsqr_solve`."""
    return lsqr_solve(op, rhs, x0=x0, tol=tol, max_iter=max_iter).x
