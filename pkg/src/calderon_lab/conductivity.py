"""Synthetic conductivities and their logarithmic data.

Two families are provided.  ``synth_smooth`` builds ``1 + a B((x-c)/R)`` from
a C-infinity bump; ``synth_cone`` builds a finite-regularity radial profile
``1 + a max(0, 1 - |x-c|/R)^alpha`` that probes the threshold regularity of
the uniqueness theorem.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .grid import PeriodicGrid, ScalarField, VectorField

__all__ = [
    "bump",
    "Conductivity",
    "LogData",
    "synth_smooth",
    "synth_cone",
    "constant",
    "from_log",
    "log_data",
    "check_pairing",
    "face_matched",
]

SMOOTH = "smooth_bump"
CONE = "cone_profile"
CUSTOM = "custom"


def bump(y2: np.ndarray, sharpness: float = 1.0) -> np.ndarray:
    """Peak-one C-infinity bump as a function of ``|y|^2``.

    ``B(y) = exp(beta - beta / (1 - |y|^2))`` inside the unit ball and zero
    outside.  ``beta = 1`` is the standard bump ``exp(-1/(1-|y|^2))`` scaled
    to peak 1; larger ``beta`` gives a flatter top with a narrower transition
    layer whose Fourier tail is much smaller on a fixed grid.
    """
    y2 = np.asarray(y2, float)
    out = np.zeros_like(y2)
    inside = y2 < 1.0
    out[inside] = np.exp(sharpness - sharpness / (1.0 - y2[inside]))
    return out


@dataclass(frozen=True, eq=False)
class Conductivity:
    """Strictly positive conductivity sampled on a periodic grid.

    Attributes
    ----------
    gamma : ndarray
        Real grid samples.
    support_radius : float
        ``gamma`` equals ``background`` outside the ball of this radius.
    profile : callable, optional
        Exact evaluation ``profile(points) -> values`` at arbitrary points;
        used by finite-volume solvers on grids of their own.  When absent,
        trigonometric interpolation of ``gamma`` is used.
    """

    grid: PeriodicGrid
    gamma: np.ndarray
    support_radius: float
    center: tuple
    lower_bound: float
    regularity_class: str = CUSTOM
    background: float = 1.0
    profile: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def as_field(self) -> ScalarField:
        return ScalarField(self.grid, self.gamma)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Values at points of shape ``(..., dim)``."""
        pts = np.asarray(points, float)
        if self.profile is not None:
            return self.profile(pts)
        flat = pts.reshape(-1, self.grid.dim)
        return self.grid.interpolate(self.gamma, flat).reshape(pts.shape[:-1])

    def outside_mask(self) -> np.ndarray:
        return self.grid.radius(self.center) > self.support_radius


@dataclass(frozen=True, eq=False)
class LogData:
    """``phi = log gamma`` and ``A = grad phi`` on the grid of ``gamma``."""

    grid: PeriodicGrid
    phi: np.ndarray
    a_field: np.ndarray
    support_radius: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)

    @property
    def phi_field(self) -> ScalarField:
        return ScalarField(self.grid, self.phi)

    @property
    def a_vector(self) -> VectorField:
        return VectorField(self.grid, self.a_field)

    @property
    def is_trivial(self) -> bool:
        return not np.any(self.a_field)


def _check_center(grid: PeriodicGrid, center, radius):
    c = np.zeros(grid.dim) if center is None else np.asarray(center, float)
    if c.shape != (grid.dim,):
        raise ValueError(f"center must have {grid.dim} coordinates")
    if radius <= 0:
        raise ValueError("radius must be positive")
    # the support ball plus a margin of one radius must fit in the cell
    if np.any(np.abs(c) + 2.0 * radius > grid.half_length + 1e-12):
        raise ValueError(
            f"support ball (center {c.tolist()}, radius {radius}) does not fit in the "
            f"torus [-{grid.half_length}, {grid.half_length}) with margin >= radius")
    return c


def synth_smooth(amplitude: float, center: Sequence[float] | None, radius: float,
                 grid: PeriodicGrid, sharpness: float = 1.0) -> Conductivity:
    """Smooth bump conductivity ``1 + amplitude * B((x - center)/radius)``.

    Parameters
    ----------
    sharpness : float
        Shape parameter ``beta`` of :func:`bump`; 1 is the standard bump.
    """
    if not amplitude > -1.0:
        raise ValueError(f"amplitude {amplitude} makes gamma non-positive (need > -1)")
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    c = _check_center(grid, center, radius)

    def profile(points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, float)
        y2 = np.sum((pts - c) ** 2, axis=-1) / radius**2
        return 1.0 + amplitude * bump(y2, sharpness)

    y2 = sum((x - cj) ** 2 for x, cj in zip(grid.coords, c)) / radius**2
    gamma = 1.0 + amplitude * bump(np.broadcast_to(y2, grid.shape), sharpness)
    return Conductivity(grid, gamma, float(radius), tuple(c.tolist()),
                        lower_bound=min(1.0, 1.0 + amplitude), regularity_class=SMOOTH,
                        profile=profile,
                        params=dict(family="smooth", amplitude=amplitude, radius=radius,
                                    center=c.tolist(), sharpness=sharpness))


def _grid_scale_kernel(grid: PeriodicGrid, sharpness: float = 1.0) -> np.ndarray:
    """Sampled standard bump of radius two cells, normalised to unit sum."""
    h = grid.spacing
    off = np.arange(-2, 3) * h
    mesh = np.meshgrid(*([off] * grid.dim), indexing="ij")
    r2 = sum(m**2 for m in mesh) / (2 * h) ** 2
    w = bump(r2, sharpness)
    return w / w.sum()


def synth_cone(amplitude: float, exponent: float, center: Sequence[float] | None,
               radius: float, grid: PeriodicGrid) -> Conductivity:
    """Radial power profile ``1 + a max(0, 1 - |x-c|/R)^alpha``.

    The profile is smoothed at grid scale by a discrete convolution with the
    sampled bump of radius ``2h``.  The discrete stencil keeps the support
    compact, so ``gamma`` is exactly 1 outside ``R + 2h``.
    """
    if not exponent > 1.0:
        raise ValueError(f"exponent must exceed 1 for a C^1 profile, got {exponent}")
    if not amplitude > -1.0:
        raise ValueError(f"amplitude {amplitude} makes gamma non-positive (need > -1)")
    c = _check_center(grid, center, radius)
    r = grid.radius(c)
    raw = amplitude * np.maximum(0.0, 1.0 - r / radius) ** exponent
    smooth = ndimage.convolve(raw, _grid_scale_kernel(grid), mode="wrap")
    gamma = 1.0 + smooth
    return Conductivity(grid, gamma, float(radius + 2 * grid.spacing), tuple(c.tolist()),
                        lower_bound=min(1.0, 1.0 + amplitude), regularity_class=CONE,
                        params=dict(family="cone", amplitude=amplitude, radius=radius,
                                    center=c.tolist(), exponent=exponent))


def constant(value: float, grid: PeriodicGrid) -> Conductivity:
    """Spatially constant conductivity (a gauge test case)."""
    if value <= 0:
        raise ValueError("conductivity must be positive")
    v = float(value)
    return Conductivity(grid, np.full(grid.shape, v), 0.0, (0.0,) * grid.dim, lower_bound=v,
                        regularity_class=CUSTOM, background=v,
                        profile=lambda p: np.full(np.asarray(p).shape[:-1], v),
                        params=dict(family="constant", value=v))


def from_log(g: np.ndarray, grid: PeriodicGrid, support_radius: float,
             center: Sequence[float] | None = None) -> Conductivity:
    """Conductivity ``exp(g)`` for a real grid function ``g``."""
    g = np.asarray(g, float)
    gamma = np.exp(g)
    c = tuple(np.zeros(grid.dim)) if center is None else tuple(center)
    return Conductivity(grid, gamma, float(support_radius), c, lower_bound=float(gamma.min()),
                        regularity_class=CUSTOM, params=dict(family="custom"))


def log_data(gamma: Conductivity) -> LogData:
    """``phi = log gamma`` pointwise and ``A`` its spectral gradient."""
    phi = np.log(gamma.gamma)
    a = gamma.grid.gradient(phi)
    return LogData(gamma.grid, phi, a, gamma.support_radius, tuple(gamma.center))


def check_pairing(g1: Conductivity, g2: Conductivity, radius: float | None = None,
                  atol: float = 1e-12) -> bool:
    """True when two conductivities coincide outside a shared ball.

    The ball is centred at the origin with the given radius, defaulting to the
    larger of the two support extents measured from the origin.
    """
    if g1.grid is not g2.grid and g1.grid.shape != g2.grid.shape:
        raise ValueError("conductivities live on different grids")
    if radius is None:
        radius = max(np.linalg.norm(g.center) + g.support_radius for g in (g1, g2))
    outside = g1.grid.radius() > radius
    return bool(np.all(np.abs(g1.gamma - g2.gamma)[outside] <= atol))


def face_matched(base: Conductivity, face_point: Sequence[float], normal: Sequence[float],
                 amplitude: float, radius: float, sharpness: float = 1.0) -> Conductivity:
    """Perturb ``base`` so that it still matches it to first order on a plane.

    Returns ``base * exp(amplitude * ((x-p).nu / radius)^2 * B((x-p)/radius))``.
    The factor is 1 with vanishing normal derivative on the plane through
    ``face_point`` with unit normal ``normal``, so both conductivities share
    their boundary values and normal derivatives on that face while differing
    on either side of it.
    """
    grid = base.grid
    p = _check_center(grid, face_point, radius)
    nu = np.asarray(normal, float)
    nu = nu / np.linalg.norm(nu)

    def log_factor(points: np.ndarray) -> np.ndarray:
        d = np.asarray(points, float) - p
        y2 = np.sum(d**2, axis=-1) / radius**2
        return amplitude * (d @ nu / radius) ** 2 * bump(y2, sharpness)

    pts = np.stack(np.broadcast_arrays(*grid.coords), axis=-1)
    base_eval = base.evaluate

    def profile(points: np.ndarray) -> np.ndarray:
        return base_eval(points) * np.exp(log_factor(points))

    gamma = base.gamma * np.exp(log_factor(pts))
    # the union of both supports, measured from the base centre
    extent = max(base.support_radius,
                 float(np.linalg.norm(p - np.asarray(base.center))) + radius)
    return Conductivity(grid, gamma, extent, tuple(base.center), lower_bound=float(gamma.min()),
                        regularity_class=CUSTOM, profile=profile,
                        params=dict(family="face_matched", base=base.params, amplitude=amplitude,
                                    radius=radius, face_point=p.tolist(), normal=nu.tolist(),
                                    sharpness=sharpness))
