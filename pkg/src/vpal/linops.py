"""Matrix-free linear operators.

Every operator maps flat real vectors to flat real vectors. Images are stored
row-major, so pixel ``(i, j)`` of an ``height x width`` image lives at index
``i * width + j``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

__all__ = [
    "LinearOperator",
    "StackedOperator",
    "MatvecCounter",
    "dense_operator",
    "identity_operator",
    "finite_difference_2d",
    "laplacian_2d",
    "gaussian_blur_operator",
    "parallel_beam_tomo",
    "adjoint_mismatch",
    "to_dense",
]


@dataclass
class MatvecCounter:
    """Number of forward and adjoint applications seen by one solve."""

    forward_count: int = 0
    adjoint_count: int = 0

    @property
    def total(self) -> int:
        return self.forward_count + self.adjoint_count

    def reset(self) -> None:
        self.forward_count = 0
        self.adjoint_count = 0

    def snapshot(self) -> "MatvecCounter":
        return MatvecCounter(self.forward_count, self.adjoint_count)

    def __add__(self, other: "MatvecCounter") -> "MatvecCounter":
        return MatvecCounter(
            self.forward_count + other.forward_count,
            self.adjoint_count + other.adjoint_count,
        )


class LinearOperator:
    """A linear map ``R^cols -> R^rows`` given by forward and adjoint callables.

    Operators are immutable. Matvec accounting is done on a *counted view*
    (see :meth:`counted`), so the same operator can be shared between
    concurrent solves that each own their counter.
    """

    def __init__(
        self,
        rows: int,
        cols: int,
        forward: Callable[[np.ndarray], np.ndarray],
        adjoint: Callable[[np.ndarray], np.ndarray],
        name: str = "operator",
    ):
        if rows < 1 or cols < 1:
            raise ValueError(f"operator shape must be positive, got ({rows}, {cols})")
        self._rows = int(rows)
        self._cols = int(cols)
        self._forward = forward
        self._adjoint = adjoint
        self.name = name

    @property
    def rows(self) -> int:
        return self._rows

    @property
    def cols(self) -> int:
        return self._cols

    @property
    def shape(self) -> tuple[int, int]:
        return (self._rows, self._cols)

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self._cols,):
            raise ValueError(f"{self.name}: expected input of length {self._cols}, got {x.shape}")
        out = self._forward(x)
        if out.shape != (self._rows,):
            raise ValueError(f"{self.name}: forward returned shape {out.shape}, expected ({self._rows},)")
        return out

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape != (self._rows,):
            raise ValueError(f"{self.name}: expected input of length {self._rows}, got {y.shape}")
        out = self._adjoint(y)
        if out.shape != (self._cols,):
            raise ValueError(f"{self.name}: adjoint returned shape {out.shape}, expected ({self._cols},)")
        return out

    def counted(self, counter: MatvecCounter) -> "LinearOperator":
        """Return a view of this operator that records applications in ``counter``."""
        base = self

        def fwd(x):
            counter.forward_count += 1
            return base._forward(x)

        def adj(y):
            counter.adjoint_count += 1
            return base._adjoint(y)

        return LinearOperator(self._rows, self._cols, fwd, adj, name=self.name)

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.name} {self._rows}x{self._cols}>"


class StackedOperator(LinearOperator):
    """The block operator ``[top; scale * bottom]``."""

    def __init__(self, top: LinearOperator, bottom: LinearOperator, scale: float = 1.0):
        if top.cols != bottom.cols:
            raise ValueError(f"column mismatch: {top.cols} vs {bottom.cols}")
        if scale < 0:
            raise ValueError("scale must be nonnegative")
        self.top = top
        self.bottom = bottom
        self.scale = float(scale)
        m = top.rows

        def fwd(x):
            return np.concatenate([top.forward(x), self.scale * bottom.forward(x)])

        def adj(y):
            return top.adjoint(y[:m]) + self.scale * bottom.adjoint(y[m:])

        super().__init__(top.rows + bottom.rows, top.cols, fwd, adj, name="stacked")


def dense_operator(M) -> LinearOperator:
    """Wrap an explicit matrix."""
    M = np.array(M, dtype=float)
    if M.ndim != 2 or M.size == 0:
        raise ValueError("dense_operator needs a non-empty 2-D matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix contains non-finite entries")
    M.setflags(write=False)
    return LinearOperator(M.shape[0], M.shape[1], lambda x: M @ x, lambda y: M.T @ y, name="dense")


def identity_operator(n: int) -> LinearOperator:
    if n < 1:
        raise ValueError("n must be >= 1")
    return LinearOperator(n, n, lambda x: x.copy(), lambda y: y.copy(), name="identity")


def finite_difference_2d(height: int, width: int) -> LinearOperator:
    """Forward differences, vertical block first, then horizontal.

    Pixels outside the image are treated as zero, so the last row (column)
    of each block differences against zero.
    """
    if height < 1 or width < 1:
        raise ValueError("image dimensions must be >= 1")
    h, w = height, width
    n = h * w

    def fwd(x):
        img = x.reshape(h, w)
        dv = -img.copy()
        dv[:-1, :] += img[1:, :]
        dh = -img.copy()
        dh[:, :-1] += img[:, 1:]
        return np.concatenate([dv.ravel(), dh.ravel()])

    def adj(y):
        pv = y[:n].reshape(h, w)
        ph = y[n:].reshape(h, w)
        out = -pv - ph
        out[1:, :] += pv[:-1, :]
        out[:, 1:] += ph[:, :-1]
        return out.ravel()

    return LinearOperator(2 * n, n, fwd, adj, name="finite_difference_2d")


def laplacian_2d(height: int, width: int) -> LinearOperator:
    """5-point Laplacian ``4 u_ij - (neighbours)`` with zero boundary."""
    if height < 1 or width < 1:
        raise ValueError("image dimensions must be >= 1")
    h, w = height, width

    def apply(x):
        img = x.reshape(h, w)
        out = 4.0 * img
        out[1:, :] -= img[:-1, :]
        out[:-1, :] -= img[1:, :]
        out[:, 1:] -= img[:, :-1]
        out[:, :-1] -= img[:, 1:]
        return out.ravel()

    return LinearOperator(h * w, h * w, apply, apply, name="laplacian_2d")


def _gaussian_kernel(psf_sigma: float, radius: int) -> np.ndarray:
    t = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-0.5 * (t / psf_sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur_operator(
    height: int, width: int, psf_sigma: float, kernel_radius: int
) -> LinearOperator:
    """Convolution with a truncated, normalised Gaussian PSF and zero padding."""
    if psf_sigma <= 0:
        raise ValueError("psf_sigma must be positive")
    if kernel_radius < 1:
        raise ValueError("kernel_radius must be >= 1")
    size = 2 * kernel_radius + 1
    if size > height or size > width:
        raise ValueError(f"kernel of size {size} does not fit a {height}x{width} image")
    kernel = _gaussian_kernel(psf_sigma, kernel_radius)
    h, w = height, width

    def fwd(x):
        return ndimage.convolve(x.reshape(h, w), kernel, mode="constant", cval=0.0).ravel()

    def adj(y):
        return ndimage.correlate(y.reshape(h, w), kernel, mode="constant", cval=0.0).ravel()

    op = LinearOperator(h * w, h * w, fwd, adj, name="gaussian_blur")
    op.kernel = kernel
    return op


def _siddon_ray(h: int, w: int, point: np.ndarray, direction: np.ndarray):
    """Pixel indices and intersection lengths of the line ``point + s*direction``.

    The image covers ``[-w/2, w/2] x [-h/2, h/2]`` with unit pixels; row 0 is
    the top row (largest y).
    """
    xs = np.arange(w + 1) - w / 2.0
    ys = np.arange(h + 1) - h / 2.0
    px, py = point
    dx, dy = direction
    lo, hi = -np.inf, np.inf
    params = []
    for p, d, planes in ((px, dx, xs), (py, dy, ys)):
        if abs(d) < 1e-14:
            if p <= planes[0] or p >= planes[-1]:
                return np.empty(0, dtype=np.intp), np.empty(0)
            continue
        s = (planes - p) / d
        lo = max(lo, s.min())
        hi = min(hi, s.max())
        params.append(s)
    if not hi > lo:
        return np.empty(0, dtype=np.intp), np.empty(0)
    s = np.concatenate([lo, hi, *params], axis=None)
    s = np.unique(s[(s >= lo) & (s <= hi)])
    seg = np.diff(s)
    keep = seg > 1e-12
    seg = seg[keep]
    mid = 0.5 * (s[:-1] + s[1:])[keep]
    mx = px + mid * dx
    my = py + mid * dy
    col = np.floor(mx + w / 2.0).astype(np.intp)
    row = np.floor(h / 2.0 - my).astype(np.intp)
    ok = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    return (row * w + col)[ok], seg[ok]


def parallel_beam_tomo(
    height: int,
    width: int,
    angles: Sequence[float],
    detectors_per_angle: int,
    detector_span: Optional[float] = None,
) -> LinearOperator:
    """Parallel-beam projector with exact ray/pixel intersection lengths.

    For angle ``theta`` rays travel along ``(cos theta, sin theta)`` and are
    offset along ``(-sin theta, cos theta)``. Detector centres are spread
    uniformly over ``detector_span`` (the image diagonal by default). The
    system matrix is traced once at construction and kept in sparse form.
    """
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if angles.size < 1:
        raise ValueError("need at least one angle")
    if detectors_per_angle < 1:
        raise ValueError("detectors_per_angle must be >= 1")
    if height < 1 or width < 1:
        raise ValueError("image dimensions must be >= 1")
    h, w, nd = height, width, int(detectors_per_angle)
    span = float(np.hypot(h, w)) if detector_span is None else float(detector_span)
    offsets = (np.arange(nd) + 0.5) * span / nd - span / 2.0

    rows, cols, vals = [], [], []
    for a, theta in enumerate(angles):
        d = np.array([np.cos(theta), np.sin(theta)])
        normal = np.array([-d[1], d[0]])
        for k, t in enumerate(offsets):
            idx, lengths = _siddon_ray(h, w, t * normal, d)
            rows.append(np.full(idx.size, a * nd + k))
            cols.append(idx)
            vals.append(lengths)
    m = angles.size * nd
    W = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, h * w)
    )
    WT = W.T.tocsr()
    op = LinearOperator(m, h * w, lambda x: W @ x, lambda y: WT @ y, name="parallel_beam_tomo")
    op.angles = angles
    op.detector_offsets = offsets
    return op


def to_dense(op: LinearOperator) -> np.ndarray:
    """Assemble the matrix of ``op`` column by column (small operators only)."""
    eye = np.eye(op.cols)
    return np.column_stack([op.forward(e) for e in eye])


def adjoint_mismatch(op: LinearOperator, rng: np.random.Generator, trials: int = 1) -> float:
    """Largest relative violation of ``<Au, v> = <u, A^T v>`` over random pairs."""
    worst = 0.0
    for _ in range(trials):
        u = rng.standard_normal(op.cols)
        v = rng.standard_normal(op.rows)
        lhs = float(op.forward(u) @ v)
        rhs = float(u @ op.adjoint(v))
        worst = max(worst, abs(lhs - rhs) / (1.0 + abs(lhs)))
    return worst
