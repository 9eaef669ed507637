"""Term-by-term evaluation of Carleman estimates with linear weights.

For a unit direction ``eta`` the conjugated Laplacian is
``exp(-t x.eta) (-Lap) exp(t x.eta) u = -Lap u - 2t eta.grad u - t^2 u``.
The estimate bounds
``C (t^2 ||u||^2 + ||grad u||^2)`` minus signed boundary integrals by the
squared ``L2`` norm of the conjugated operator applied to ``u``.  This module
evaluates each term; constants are never assumed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .conductivity import LogData
from .grid import PeriodicGrid, ScalarField
from .mollifier import MollifiedPair

__all__ = [
    "QuadratureError",
    "conjugated_laplacian",
    "conjugated_perturbed",
    "interior_ratio",
    "absorption_margin",
    "QuadDomain",
    "AnalyticSampler",
    "SpectralSampler",
    "CarlemanReport",
    "boundary_report",
    "trace_check",
    "divergence_consistency",
]


class QuadratureError(RuntimeError):
    """A quadrature rule failed its self-test."""


def _unit(eta):
    e = np.asarray(eta, float)
    n = np.linalg.norm(e)
    if not np.isclose(n, 1.0, atol=1e-12):
        raise ValueError("eta must be a unit vector")
    return e


def _values(u, grid):
    if isinstance(u, ScalarField):
        return u.physical(), u.grid
    if grid is None:
        raise ValueError("grid is required for raw arrays")
    return np.asarray(u), grid


def conjugated_laplacian(u, t: float, eta, grid: PeriodicGrid | None = None) -> np.ndarray:
    """``-Lap u - 2t eta.grad u - t^2 u`` by spectral multiplication."""
    v, g = _values(u, grid)
    e = _unit(eta)
    k2 = sum(k**2 for k in g.dfreqs)
    ek = sum(ej * kj for ej, kj in zip(e, g.dfreqs))
    sym = k2 - 2j * t * ek - t * t
    return g.ifft(sym * g.fft(v))


def conjugated_perturbed(u, t: float, eta, log: LogData, pair: MollifiedPair,
                         grid: PeriodicGrid | None = None) -> np.ndarray:
    """Conjugated Laplacian plus ``(A_t - A).(grad u + t eta u) + q_t u``."""
    v, g = _values(u, grid if grid is not None else log.grid)
    e = _unit(eta)
    out = conjugated_laplacian(v, t, e, g)
    grad = g.gradient(v)
    da = pair.a_t - log.a_field
    out = out + sum(da[j] * (grad[j] + t * e[j] * v) for j in range(g.dim)) + pair.q_t * v
    return out


def absorption_margin(log: LogData, pair: MollifiedPair) -> dict:
    """The quantities absorbed when passing from the free to the perturbed estimate."""
    da = pair.a_t - log.a_field
    sup_da = float(np.max(np.sqrt(np.sum(da**2, axis=0))))
    sup_q = float(np.max(np.abs(pair.q_t)))
    return dict(two_sup_da_sq=2 * sup_da**2, two_sup_q_sq_over_t2=2 * sup_q**2 / pair.t**2)


# --------------------------------------------------------------------------
# quadrature domains
# --------------------------------------------------------------------------
@dataclass
class QuadDomain:
    """Ball or box with boundary and interior quadrature rules.

    Use the constructors :meth:`ball` and :meth:`box`.
    """

    shape: str
    dim: int
    center: np.ndarray
    radius: float = 0.0
    corner: np.ndarray | None = None
    sides: np.ndarray | None = None
    boundary_points: np.ndarray = field(default=None, repr=False)
    normals: np.ndarray = field(default=None, repr=False)
    boundary_weights: np.ndarray = field(default=None, repr=False)
    interior_points: np.ndarray = field(default=None, repr=False)
    interior_weights: np.ndarray = field(default=None, repr=False)

    # ------------------------------------------------------------ constructors
    @classmethod
    def ball(cls, center, radius: float, n_theta: int = 48, n_phi: int = 96,
             n_radial: int = 32, self_test: bool = True) -> "QuadDomain":
        """Gauss-Legendre in ``cos(theta)`` times the periodic trapezoid rule in ``phi``.

        In 2-D the boundary circle uses ``n_phi`` trapezoid nodes.  The
        interior rule is radial Gauss-Legendre times the boundary rule.
        """
        c = np.asarray(center, float)
        dim = c.size
        if radius <= 0:
            raise ValueError("radius must be positive")
        ph = 2 * np.pi * np.arange(n_phi) / n_phi
        if dim == 3:
            mu, wmu = np.polynomial.legendre.leggauss(n_theta)
            st = np.sqrt(1 - mu**2)
            dirs = np.stack([np.outer(st, np.cos(ph)), np.outer(st, np.sin(ph)),
                             np.outer(mu, np.ones_like(ph))], axis=-1).reshape(-1, 3)
            wdir = np.outer(wmu, np.full(n_phi, 2 * np.pi / n_phi)).ravel()
        elif dim == 2:
            dirs = np.stack([np.cos(ph), np.sin(ph)], axis=-1)
            wdir = np.full(n_phi, 2 * np.pi / n_phi)
        else:
            raise ValueError("dimension must be 2 or 3")
        xr, wr = np.polynomial.legendre.leggauss(n_radial)
        r = 0.5 * radius * (xr + 1)
        wr = 0.5 * radius * wr * r ** (dim - 1)
        ipts = (r[:, None, None] * dirs[None, :, :]).reshape(-1, dim) + c
        iw = np.outer(wr, wdir).ravel()
        dom = cls("ball", dim, c, float(radius),
                  boundary_points=c + radius * dirs, normals=dirs,
                  boundary_weights=radius ** (dim - 1) * wdir,
                  interior_points=ipts, interior_weights=iw)
        if self_test:
            dom.self_test()
        return dom

    @classmethod
    def box(cls, corner, sides, n: int = 24, self_test: bool = True) -> "QuadDomain":
        """Tensor Gauss-Legendre rules on every face and in the interior."""
        c0 = np.asarray(corner, float)
        sd = np.asarray(sides, float)
        dim = c0.size
        if np.any(sd <= 0):
            raise ValueError("box sides must be positive")
        x, w = np.polynomial.legendre.leggauss(n)
        nodes = [c0[j] + 0.5 * sd[j] * (x + 1) for j in range(dim)]
        wts = [0.5 * sd[j] * w for j in range(dim)]
        mesh = np.meshgrid(*nodes, indexing="ij")
        ipts = np.stack([m.ravel() for m in mesh], axis=-1)
        iw = np.ones(1)
        for wj in wts:
            iw = np.multiply.outer(iw, wj)
        iw = iw.ravel()
        bp, bn, bw = [], [], []
        for j in range(dim):
            others = [i for i in range(dim) if i != j]
            fm = np.meshgrid(*[nodes[i] for i in others], indexing="ij")
            fw = np.ones(1)
            for i in others:
                fw = np.multiply.outer(fw, wts[i])
            fw = fw.ravel()
            for side, val in ((-1.0, c0[j]), (1.0, c0[j] + sd[j])):
                pts = np.empty((fw.size, dim))
                for i, m in zip(others, fm):
                    pts[:, i] = m.ravel()
                pts[:, j] = val
                nrm = np.zeros((fw.size, dim))
                nrm[:, j] = side
                bp.append(pts)
                bn.append(nrm)
                bw.append(fw)
        dom = cls("box", dim, c0 + 0.5 * sd, corner=c0, sides=sd,
                  boundary_points=np.concatenate(bp), normals=np.concatenate(bn),
                  boundary_weights=np.concatenate(bw), interior_points=ipts, interior_weights=iw)
        if self_test:
            dom.self_test()
        return dom

    # ------------------------------------------------------------------ helpers
    @property
    def surface_area(self) -> float:
        if self.shape == "ball":
            return (4 * np.pi if self.dim == 3 else 2 * np.pi) * self.radius ** (self.dim - 1)
        s = self.sides
        return float(sum(2 * np.prod(np.delete(s, j)) for j in range(self.dim)))

    @property
    def volume(self) -> float:
        if self.shape == "ball":
            return (4 * np.pi / 3 if self.dim == 3 else np.pi) * self.radius**self.dim
        return float(np.prod(self.sides))

    def signed_distance(self, points) -> np.ndarray:
        """Distance to the boundary, positive inside."""
        p = np.asarray(points, float)
        if self.shape == "ball":
            return self.radius - np.linalg.norm(p - self.center, axis=-1)
        lo = p - self.corner
        hi = self.corner + self.sides - p
        inside = np.minimum(lo, hi).min(axis=-1)
        outside = np.linalg.norm(np.maximum(np.maximum(-lo, -hi), 0), axis=-1)
        return np.where(inside >= 0, inside, -outside)

    def self_test(self) -> dict:
        """Check surface area and the divergence theorem on a cubic vector field."""
        area = float(self.boundary_weights.sum())
        area_err = abs(area - self.surface_area) / self.surface_area
        x = self.interior_points - self.center
        y = self.boundary_points - self.center
        if self.dim == 3:
            def fld(p):
                return np.stack([p[:, 0] ** 2 * p[:, 1] + p[:, 2], p[:, 1] * p[:, 2] ** 2,
                                 p[:, 0] * p[:, 1] * p[:, 2] + p[:, 2] ** 3], axis=-1)
            div = 3 * x[:, 0] * x[:, 1] + 4 * x[:, 2] ** 2
        else:
            def fld(p):
                return np.stack([p[:, 0] ** 3 + p[:, 1], p[:, 0] * p[:, 1] ** 2], axis=-1)
            div = 3 * x[:, 0] ** 2 + 2 * x[:, 0] * x[:, 1]
        vol_int = float(self.interior_weights @ div)
        flux = float(self.boundary_weights @ np.sum(fld(y) * self.normals, axis=1))
        scale = max(abs(vol_int), abs(flux), self.volume)
        div_err = abs(vol_int - flux) / scale
        vol_err = abs(self.interior_weights.sum() - self.volume) / self.volume
        report = dict(area_error=area_err, divergence_error=div_err, volume_error=vol_err)
        if area_err > 1e-6 or vol_err > 1e-6:
            raise QuadratureError(f"quadrature weights fail the measure test: {report}")
        if div_err > 1e-5:
            raise QuadratureError(f"divergence-theorem self-test failed: {report}")
        return report


# --------------------------------------------------------------------------
# samplers: value, gradient and Laplacian at arbitrary points
# --------------------------------------------------------------------------
@dataclass
class AnalyticSampler:
    """Closed-form function given by callables on ``(P, dim)`` point arrays."""

    value: Callable
    grad: Callable
    lap: Callable | None = None

    def __call__(self, points):
        p = np.atleast_2d(points)
        lap = self.lap(p) if self.lap is not None else np.full(len(p), np.nan)
        return self.value(p), self.grad(p), lap

    @classmethod
    def constant(cls, c: float = 1.0, dim: int = 3):
        return cls(lambda p: np.full(len(p), c, dtype=float),
                   lambda p: np.zeros((len(p), dim)),
                   lambda p: np.zeros(len(p)))

    @classmethod
    def linear(cls, a):
        a = np.asarray(a, float)
        return cls(lambda p: p @ a, lambda p: np.tile(a, (len(p), 1)), lambda p: np.zeros(len(p)))


class SpectralSampler:
    """Trigonometric interpolant of a grid function and its derivatives.

    When the field has at most ``max_modes`` non-zero coefficients away from
    the Nyquist planes, the interpolant is evaluated as a direct sum over
    those modes; otherwise the dense separable contraction of
    :meth:`PeriodicGrid.interpolate_hat` is used.
    """

    def __init__(self, grid: PeriodicGrid, values, max_modes: int = 4096):
        v = values.physical() if isinstance(values, ScalarField) else np.asarray(values)
        self.grid = grid
        self.real = np.isrealobj(v)
        self.coeffs = grid.fft(v)
        # coefficients at round-off level relative to the largest are treated as zero
        cmax = np.max(np.abs(self.coeffs)) if self.coeffs.size else 0.0
        nz = np.nonzero(np.abs(self.coeffs) > 1e-14 * cmax)
        ny = grid.points_per_axis // 2
        sparse = len(nz[0]) <= max_modes and not any(np.any(ix == ny) for ix in nz)
        if sparse:
            self.modes = np.stack([grid.wavenumbers[ix] for ix in nz], axis=-1)
            self.mode_coeffs = self.coeffs[nz]
        else:
            self.modes = None

    def __call__(self, points):
        g = self.grid
        p = np.atleast_2d(np.asarray(points, float))
        if self.modes is not None:
            ph = np.exp(1j * (p + g.half_length) @ self.modes.T)
            val = ph @ self.mode_coeffs
            grad = (ph * 1j) @ (self.modes * self.mode_coeffs[:, None])
            lap = ph @ (-np.sum(self.modes**2, axis=1) * self.mode_coeffs)
        else:
            val = g.interpolate_hat(self.coeffs, p)
            grad = np.stack([g.interpolate_hat(self.coeffs, p, derivative=j)
                             for j in range(g.dim)], axis=-1)
            lap_hat = -sum(k**2 for k in g.dfreqs) * self.coeffs
            lap = g.interpolate_hat(lap_hat, p)
        if self.real:
            return val.real, grad.real, lap.real
        return val, grad, lap


def _sampler(u, grid=None):
    if callable(u):
        return u
    if isinstance(u, ScalarField):
        return SpectralSampler(u.grid, u)
    if grid is None:
        raise ValueError("grid is required for raw arrays")
    return SpectralSampler(grid, u)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------
def interior_ratio(u, t: float, eta, mode: str = "free", log: LogData | None = None,
                   pair: MollifiedPair | None = None, domain: QuadDomain | None = None,
                   grid: PeriodicGrid | None = None) -> float:
    """``||P u||^2 / (t^2 ||u||^2 + ||grad u||^2)`` for ``u`` supported inside ``domain``.

    ``P`` is the conjugated Laplacian (``mode='free'``) or its perturbation by
    the mollified log-conductivity data (``mode='perturbed'``).  Norms are grid
    norms; since ``u`` vanishes near the boundary every boundary term of the
    estimate is zero.
    """
    v, g = _values(u, grid if grid is not None else (log.grid if log is not None else None))
    scale = float(np.max(np.abs(v)))
    if scale == 0:
        raise ValueError("u must not vanish identically")
    if domain is not None:
        pts = g.mesh().reshape(g.dim, -1).T
        near = domain.signed_distance(pts) < 2 * g.spacing
        if np.any(np.abs(v.ravel()[near]) > 1e-12 * scale):
            raise ValueError("u does not vanish within two cells of the domain boundary")
    if mode == "free":
        pu = conjugated_laplacian(v, t, eta, g)
    elif mode == "perturbed":
        if log is None or pair is None:
            raise ValueError("perturbed mode needs log data and a mollified pair")
        pu = conjugated_perturbed(v, t, eta, log, pair, g)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    grad = g.gradient(v)
    den = t * t * g.l2_norm(v) ** 2 + sum(g.l2_norm(gj) ** 2 for gj in grad)
    return float(g.l2_norm(pu) ** 2 / den)


@dataclass
class CarlemanReport:
    """Every term of the boundary Carleman inequality.

    Boundary terms are stored as the printed integrals; the inequality reads
    ``C*(vol_t2_u2 + vol_grad2) - C1*bnd_t2_u2 - C2*Re(bnd_u_dnu)
    + bnd_4t_re - bnd_2t_grad + bnd_2t3_u2 <= rhs``.
    """

    t: float
    eta: list
    volume_terms: dict
    boundary_terms: dict
    rhs: float
    ratio: float
    constants: tuple = (1.0, 1.0, 1.0)
    slack: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def boundary_report(u, t: float, eta, dom: QuadDomain, constants=(1.0, 1.0, 1.0),
                    grid: PeriodicGrid | None = None) -> CarlemanReport:
    """Evaluate the volume, boundary and right-hand terms by quadrature."""
    e = _unit(eta)
    smp = _sampler(u, grid)
    ub, gb, _ = smp(dom.boundary_points)
    ui, gi, li = smp(dom.interior_points)
    bw, iw, nu = dom.boundary_weights, dom.interior_weights, dom.normals
    dnu = np.sum(gb * nu, axis=1)
    deta = gb @ e
    nue = nu @ e
    grad2_b = np.sum(np.abs(gb) ** 2, axis=1)
    vol = dict(vol_t2_u2=float(t * t * iw @ np.abs(ui) ** 2),
               vol_grad2=float(iw @ np.sum(np.abs(gi) ** 2, axis=1)))
    udn = complex(bw @ (np.conj(ub) * dnu))
    bnd = dict(
        bnd_t2_u2=float(t * t * bw @ np.abs(ub) ** 2),
        bnd_u_dnu_re=udn.real,
        bnd_u_dnu_im=udn.imag,
        bnd_4t_re=float(4 * t * bw @ np.real(dnu * np.conj(deta))),
        bnd_2t_grad=float(2 * t * bw @ (nue * grad2_b)),
        bnd_2t3_u2=float(2 * t**3 * bw @ (nue * np.abs(ub) ** 2)),
    )
    pu = -li - 2 * t * (gi @ e) - t * t * ui
    rhs = float(iw @ np.abs(pu) ** 2)
    c, c1, c2 = constants
    vsum = vol["vol_t2_u2"] + vol["vol_grad2"]
    lhs = (c * vsum - c1 * bnd["bnd_t2_u2"] - c2 * bnd["bnd_u_dnu_re"] + bnd["bnd_4t_re"]
           - bnd["bnd_2t_grad"] + bnd["bnd_2t3_u2"])
    ratio = rhs / vsum if vsum > 0 else 0.0
    return CarlemanReport(float(t), e.tolist(), vol, bnd, rhs, float(ratio), tuple(constants),
                          float(rhs - lhs))


def trace_check(u, dom: QuadDomain, grid: PeriodicGrid | None = None) -> dict:
    """Fit the constant of the trace inequality ``int u^2 <= C(|u||grad u| + |u|^2)``."""
    smp = _sampler(u, grid)
    ub, _, _ = smp(dom.boundary_points)
    ui, gi, _ = smp(dom.interior_points)
    lhs = float(dom.boundary_weights @ np.abs(ub) ** 2)
    nu2 = float(dom.interior_weights @ np.abs(ui) ** 2)
    ng2 = float(dom.interior_weights @ np.sum(np.abs(gi) ** 2, axis=1))
    bracket = np.sqrt(nu2 * ng2) + nu2
    if bracket == 0:
        raise ValueError("u must not vanish identically")
    return dict(lhs=lhs, bracket=float(bracket), fitted_C=float(lhs / bracket))


def divergence_consistency(u, dom: QuadDomain, grid: PeriodicGrid | None = None) -> dict:
    """Compare ``int Lap(u^2)`` over the domain with ``2 int u d_nu u`` on its boundary."""
    smp = _sampler(u, grid)
    ub, gb, _ = smp(dom.boundary_points)
    ui, gi, li = smp(dom.interior_points)
    vol = float(dom.interior_weights @ np.real(2 * np.sum(gi * gi, axis=1) + 2 * ui * li))
    bnd = float(2 * dom.boundary_weights @ np.real(ub * np.sum(gb * dom.normals, axis=1)))
    return dict(volume=vol, boundary=bnd, relative=abs(vol - bnd) / max(abs(vol), abs(bnd), 1e-300))
