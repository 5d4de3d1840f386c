"""Test problems: phantoms, noise, operator assembly and error metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linops import (
    LinearOperator,
    finite_difference_2d,
    gaussian_blur_operator,
    identity_operator,
    laplacian_2d,
    parallel_beam_tomo,
)

FAMILIES = ("denoise", "blur", "tomo")
REGULARIZERS = ("tv", "laplacian", "identity")
PHANTOMS = ("piecewise", "shepp_logan")

DEFAULT_GEOMETRY = {
    "phantom": None,  # per-family default
    "psf_sigma": 1.0,
    "kernel_radius": 3,
    "n_angles": None,  # n_side
    "detectors": None,  # ceil(sqrt(2) * n_side)
    "angle_seed": None,  # None: uniform angles in [0, pi)
    "n_shapes": 6,
    "phantom_seed": None,  # defaults to the problem seed
    "noise_mode": "scaled",
    "intensity": 255.0,  # x_true = intensity * phantom
}


@dataclass
class Phantom:
    height: int
    width: int
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.clip(np.asarray(self.pixels, dtype=float).ravel(), 0.0, 1.0)
        if self.pixels.size != self.height * self.width:
            raise ValueError("pixel count does not match height*width")

    @property
    def image(self) -> np.ndarray:
        return self.pixels.reshape(self.height, self.width)


@dataclass
class ProblemInstance:
    A: LinearOperator
    D: LinearOperator
    b: np.ndarray
    x_true: Optional[np.ndarray] = None
    sigma: float = 0.0
    noise_seed: int = 0
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=float)
        if self.A.cols != self.D.cols:
            raise ValueError("A and D must have the same number of columns")
        if self.b.shape != (self.A.rows,):
            raise ValueError("b must have length A.rows")
        if not np.all(np.isfinite(self.b)):
            raise ValueError("b contains non-finite values")
        if self.x_true is not None and np.shape(self.x_true) != (self.A.cols,):
            raise ValueError("x_true must have length A.cols")

    @property
    def m(self) -> int:
        return self.A.rows

    @property
    def n(self) -> int:
        return self.A.cols

    @property
    def ell(self) -> int:
        return self.D.rows


# (intensity, semi-axis a, semi-axis b, x0, y0, rotation in degrees);
# modified intensities so the head lies in [0, 1]
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def _pixel_centres(n_side: int):
    t = (np.arange(n_side) + 0.5) / n_side * 2.0 - 1.0
    X, Y = np.meshgrid(t, -t)  # row 0 at the top (y = +1)
    return X, Y


def _ellipse_mask(X, Y, a, b, x0, y0, deg):
    th = math.radians(deg)
    xr = (X - x0) * math.cos(th) + (Y - y0) * math.sin(th)
    yr = -(X - x0) * math.sin(th) + (Y - y0) * math.cos(th)
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def shepp_logan_2d(n_side: int) -> Phantom:
    """Ten-ellipse Shepp-Logan head sampled at pixel centres over ``[-1, 1]^2``."""
    if n_side < 8:
        raise ValueError("n_side must be >= 8")
    X, Y = _pixel_centres(n_side)
    img = np.zeros((n_side, n_side))
    for value, a, b, x0, y0, deg in _SHEPP_LOGAN:
        img[_ellipse_mask(X, Y, a, b, x0, y0, deg)] += value
    return Phantom(n_side, n_side, img)


def piecewise_phantom(n_side: int, seed: int, n_shapes: int = 6) -> Phantom:
    """Random rectangles and ellipses of constant intensity on a zero background."""
    if n_side < 8:
        raise ValueError("n_side must be >= 8")
    rng = np.random.default_rng(seed)
    X, Y = _pixel_centres(n_side)
    img = np.zeros((n_side, n_side))
    for _ in range(n_shapes):
        value = rng.uniform(0.2, 1.0)
        cx, cy = rng.uniform(-0.6, 0.6, size=2)
        a, b = rng.uniform(0.15, 0.5, size=2)
        if rng.random() < 0.5:
            mask = (np.abs(X - cx) <= a) & (np.abs(Y - cy) <= b)
        else:
            mask = _ellipse_mask(X, Y, a, b, cx, cy, rng.uniform(0.0, 180.0))
        img[mask] = value
    return Phantom(n_side, n_side, img)


def snr_from_noise(noise_percent: float) -> float:
    return -20.0 * math.log10(noise_percent)


def add_noise(clean, noise_percent: float, seed: int, mode: str = "scaled"):
    """Add white Gaussian noise with relative level ``noise_percent`` (0.1 = 10%).

    ``mode="scaled"`` rescales the draw so ``||e|| = noise_percent * ||clean||``
    exactly; ``mode="iid"`` draws ``e ~ N(0, sigma^2 I)`` with the same sigma.
    Returns ``(b, sigma, snr)``.
    """
    clean = np.asarray(clean, dtype=float)
    norm = float(np.linalg.norm(clean))
    if norm == 0.0:
        raise ValueError("cannot add relative noise to a zero vector")
    if not noise_percent > 0:
        raise ValueError("noise_percent must be positive")
    m = clean.size
    sigma = noise_percent * norm / math.sqrt(m)
    e = np.random.default_rng(seed).standard_normal(m)
    if mode == "scaled":
        e *= noise_percent * norm / np.linalg.norm(e)
    elif mode == "iid":
        e *= sigma
    else:
        raise ValueError(f"unknown noise mode {mode!r}")
    return clean + e, sigma, snr_from_noise(noise_percent)


def _regime(m: int, n: int) -> str:
    if m == n:
        return "square"
    return "underdetermined" if m < n else "overdetermined"


def build_problem(
    family: str,
    n_side: int,
    noise_percent: float = 0.1,
    reg: str = "tv",
    seed: int = 0,
    geometry: Optional[dict] = None,
) -> ProblemInstance:
    """Assemble phantom, forward operator, regulariser and noisy data."""
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    if reg not in REGULARIZERS:
        raise ValueError(f"reg must be one of {REGULARIZERS}")
    geo = dict(DEFAULT_GEOMETRY)
    unknown = set(geometry or {}) - set(geo)
    if unknown:
        raise ValueError(f"unknown geometry keys: {sorted(unknown)}")
    geo.update(geometry or {})

    phantom_kind = geo["phantom"] or ("shepp_logan" if family == "tomo" else "piecewise")
    if phantom_kind == "shepp_logan":
        ph = shepp_logan_2d(n_side)
    elif phantom_kind == "piecewise":
        pseed = seed if geo["phantom_seed"] is None else geo["phantom_seed"]
        ph = piecewise_phantom(n_side, pseed, int(geo["n_shapes"]))
    else:
        raise ValueError(f"phantom must be one of {PHANTOMS}")
    n = n_side * n_side

    if family == "denoise":
        A = identity_operator(n)
    elif family == "blur":
        A = gaussian_blur_operator(n_side, n_side, float(geo["psf_sigma"]), int(geo["kernel_radius"]))
    else:
        n_angles = int(geo["n_angles"] or n_side)
        detectors = int(geo["detectors"] or math.ceil(math.sqrt(2.0) * n_side))
        if n_angles < 1 or detectors < 1:
            raise ValueError("tomography needs at least one angle and one detector")
        if geo["angle_seed"] is None:
            angles = np.arange(n_angles) * math.pi / n_angles
        else:
            angles = np.sort(np.random.default_rng(geo["angle_seed"]).uniform(0, math.pi, n_angles))
        A = parallel_beam_tomo(n_side, n_side, angles, detectors)

    if reg == "tv":
        D = finite_difference_2d(n_side, n_side)
    elif reg == "laplacian":
        D = laplacian_2d(n_side, n_side)
    else:
        D = identity_operator(n)

    intensity = float(geo["intensity"])
    if not intensity > 0:
        raise ValueError("intensity must be positive")
    x_true = intensity * ph.pixels
    clean = A.forward(x_true)
    b, sigma, snr = add_noise(clean, noise_percent, seed, mode=geo["noise_mode"])
    descriptor = {
        "family": family,
        "n_side": n_side,
        "noise_percent": noise_percent,
        "reg": reg,
        "phantom": phantom_kind,
        "seed": seed,
        "snr": snr,
        "m": A.rows,
        "n": n,
        "ell": D.rows,
        "regime": _regime(A.rows, n),
        "intensity": intensity,
    }
    return ProblemInstance(A, D, b, x_true, sigma, seed, descriptor)


def relative_error(x, x_true) -> float:
    x_true = np.asarray(x_true, dtype=float)
    nt = float(np.linalg.norm(x_true))
    if nt == 0.0:
        raise ValueError("x_true is zero")
    return float(np.linalg.norm(np.asarray(x, dtype=float) - x_true)) / nt


def relative_residual(x, A: LinearOperator, b) -> float:
    b = np.asarray(b, dtype=float)
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        raise ValueError("b is zero")
    return float(np.linalg.norm(A.forward(np.asarray(x, dtype=float)) - b)) / nb
