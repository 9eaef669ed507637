"""Complex geometrical optics solutions by fixed-point iteration.

The CGO ansatz ``u = exp(-phi_t/2) exp(x.zeta) (1 + w)`` turns the
conductivity equation into an equation for the remainder ``w``::

    -Lap_zeta w + (A_t - A).grad_zeta w + q_t w = (A - A_t).zeta - q_t,

with ``Lap_zeta = Lap + 2 zeta.grad`` and ``grad_zeta = grad + zeta``.  It is
solved by Picard iteration of

    T(w) = Lap_zeta^{-1}[(A_t - A).grad_zeta w + q_t w]
           + Lap_zeta^{-1}[(A_t - A).zeta + q_t]

in the homogeneous Bourgain norm of order 1/2.

Zero-mode compensation
----------------------
On the torus the symbol vanishes at ``xi = 0`` for every ``zeta``, so a
source with non-zero mean has no periodic preimage.  Before each inversion
the mean of the source is removed by subtracting a multiple of a smooth
function ``chi`` that vanishes on the cube ``|x|_inf <= rho`` (the *validity
cube*) and equals 1 near the faces of the periodic cell.  The remainder
equation is therefore satisfied exactly, up to the iteration tolerance,
inside the validity cube, which contains the conductivity support and every
domain used for measurements.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bourgain import DEFAULT_FLOOR, CgoParameters, ZetaOperator, make_zeta_pair, smooth_step
from .conductivity import LogData
from .grid import PeriodicGrid, ScalarField, save_field
from .mollifier import MollifiedPair, MollifierKernel, default_kernel, make_pair
from .rates import RateTable

__all__ = [
    "CgoSolverError",
    "NonContractiveError",
    "MaxIterError",
    "CgoSolution",
    "CgoProblem",
    "assemble_rhs",
    "apply_fixed_point",
    "solve_w",
    "LogPolarField",
    "build_cgo",
    "cgo_equation_residual",
    "decay_sweep",
    "compensator",
    "domain_mask",
]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50
VALIDITY_FRACTION = 0.8  # validity cube half-width as a fraction of L
COMPENSATOR_FRACTION = 0.95  # chi reaches 1 at this fraction of L


class CgoSolverError(RuntimeError):
    """Base class for fixed-point failures; carries the iteration history."""

    code = "CGO_ERROR"

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class NonContractiveError(CgoSolverError):
    code = "NON_CONTRACTIVE"


class MaxIterError(CgoSolverError):
    code = "MAX_ITER"


def compensator(grid: PeriodicGrid, inner: float | None = None, outer: float | None = None):
    """Smooth ``chi = 1 - prod_j c(x_j)`` vanishing on ``|x|_inf <= inner``."""
    L = grid.half_length
    inner = VALIDITY_FRACTION * L if inner is None else inner
    outer = COMPENSATOR_FRACTION * L if outer is None else outer
    prod = np.ones(grid.shape)
    for x in grid.coords:
        prod = prod * smooth_step((np.abs(x) - inner) / (outer - inner))
    return 1.0 - prod


def validity_mask(grid: PeriodicGrid, inner: float | None = None) -> np.ndarray:
    inner = VALIDITY_FRACTION * grid.half_length if inner is None else inner
    m = np.ones(grid.shape, bool)
    for x in grid.coords:
        m = m & (np.abs(x) <= inner)
    return m


def domain_mask(grid: PeriodicGrid, radius: float, center=None, cells: float = 2.0) -> np.ndarray:
    """Mask of the ball ``|x - c| <= radius`` with its edge smoothed over ``cells`` cells."""
    r = grid.radius(center)
    return smooth_step((r - radius) / (cells * grid.spacing))


def assemble_rhs(log: LogData, pair: MollifiedPair, zeta) -> np.ndarray:
    """Right-hand side ``(A - A_t).zeta - q_t`` of the remainder equation."""
    z = np.asarray(zeta, complex)
    da = log.a_field - pair.a_t
    return np.tensordot(z, da, axes=(0, 0)) - pair.q_t


class CgoProblem:
    """Pre-assembled fixed-point map for one ``(gamma, zeta, t)``.

    Works on spectral coefficients; ``apply`` costs five FFTs in 3-D.
    """

    def __init__(self, log: LogData, pair: MollifiedPair, zeta, floor: float = DEFAULT_FLOOR,
                 compensate: bool = True):
        g = log.grid
        self.grid = g
        self.zeta = np.asarray(zeta, complex)
        self.op = ZetaOperator(g, zeta, floor)
        self.da = pair.a_t - log.a_field  # A_t - A
        self.q = pair.q_t
        self.source = np.tensordot(self.zeta, self.da, axes=(0, 0)) + self.q
        self.trivial = not (np.any(self.da) or np.any(self.q))
        self.compensate = compensate
        if compensate:
            chi = compensator(g)
            self.chi_hat = g.fft(chi)
            self.chi_hat = self.chi_hat / self.chi_hat.flat[0]

    def _compensated(self, s_hat):
        if self.compensate:
            s_hat = s_hat - s_hat.flat[0] * self.chi_hat
        return s_hat

    def potential(self, w_hat: np.ndarray) -> np.ndarray:
        """``(A_t - A).grad_zeta w + q_t w`` in physical space."""
        g = self.grid
        w = g.ifft(w_hat)
        out = self.q * w
        for j, kj in enumerate(g.dfreqs):
            dw = g.ifft(1j * kj * w_hat)
            out = out + self.da[j] * (dw + self.zeta[j] * w)
        return out

    def apply(self, w_hat: np.ndarray) -> np.ndarray:
        if self.trivial:
            return np.zeros(self.grid.shape, complex)
        s = self.potential(w_hat) + self.source
        return self.op.inverse_hat(self._compensated(self.grid.fft(s)))

    def xnorm(self, c: np.ndarray) -> float:
        return self.op.norm_hat(c, 0.5, homogeneous=True)

    def equation_residual(self, w_hat: np.ndarray, mask=None) -> tuple[float, float, float]:
        """L2 norms of the remainder-equation residual and of its right side.

        The residual is split spectrally into its part on the non-floored
        modes, where the multiplier inverse is exact, and its part on the
        floored modes, which no iteration can reduce.  All three norms are
        measured on ``mask`` (defaults to the validity cube).

        Returns
        -------
        resolved, rhs, floored : float
        """
        g = self.grid
        # residual of the compensated equation; on the validity cube the
        # compensator vanishes, so this is the residual of the true equation
        s_hat = self._compensated(g.fft(self.potential(w_hat) + self.source))
        res_hat = self.op.forward_hat(w_hat) - s_hat
        fl = self.op.floored
        m = validity_mask(g) if mask is None else mask
        resolved = g.ifft(np.where(fl, 0.0, res_hat))
        floored = g.ifft(np.where(fl, res_hat, 0.0))
        return g.l2_norm(resolved * m), g.l2_norm(self.source * m), g.l2_norm(floored * m)


@dataclass
class CgoSolution:
    """Converged remainder ``w`` with iteration diagnostics."""

    params: CgoParameters
    index: int
    t_scale: float
    w: np.ndarray
    residual_history: list
    norm_record: dict
    converged: bool = True
    floored_count: int = 0
    equation_residual: float = 0.0
    rhs_norm: float = 0.0
    tol: float = DEFAULT_TOL
    floor: float = DEFAULT_FLOOR
    grid: PeriodicGrid | None = field(default=None, repr=False)
    floored_residual: float = 0.0

    @property
    def zeta(self) -> np.ndarray:
        return self.params.zeta(self.index)

    @property
    def iterations(self) -> int:
        return len(self.residual_history)

    @property
    def contraction_ratios(self) -> list:
        h = self.residual_history
        return [h[i + 1] / h[i] for i in range(len(h) - 1) if h[i] > 0]

    def diagnostics(self) -> dict:
        return dict(params=self.params.to_dict(), index=self.index, t_scale=self.t_scale,
                    converged=self.converged, iterations=self.iterations,
                    residual_history=self.residual_history,
                    contraction_ratios=self.contraction_ratios,
                    norm_record=self.norm_record, floored_count=self.floored_count,
                    equation_residual=self.equation_residual, rhs_norm=self.rhs_norm,
                    floored_residual=self.floored_residual,
                    tol=self.tol, floor=self.floor)

    def save(self, stem) -> None:
        """Write ``<stem>.field`` (remainder) and ``<stem>.json`` (diagnostics)."""
        save_field(ScalarField(self.grid, self.w), f"{stem}.field")
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.diagnostics(), fh, indent=2)


def apply_fixed_point(w, log: LogData, pair: MollifiedPair, zeta, floor: float = DEFAULT_FLOOR,
                      compensate: bool = True):
    """One application of the fixed-point map to a physical-space ``w``."""
    prob = CgoProblem(log, pair, zeta, floor, compensate)
    w_arr = w.physical() if isinstance(w, ScalarField) else np.asarray(w)
    out = log.grid.ifft(prob.apply(log.grid.fft(w_arr)))
    return out, prob.op.floored_count


def _domain_norms(grid, w, radius, center):
    if radius <= 0:
        radius = 0.5 * VALIDITY_FRACTION * grid.half_length
    wm = w * domain_mask(grid, radius, center)
    c = grid.fft(wm)
    vol = grid.volume

    def sob(order):
        return float(np.sqrt(vol * np.sum((grid.sobolev_weight(order) * np.abs(c)) ** 2)))

    return dict(l2_on_domain=sob(0.0), h1_on_domain=sob(1.0), h2_on_domain=sob(2.0))


def solve_w(log: LogData, kernel: MollifierKernel | None, zeta_params: CgoParameters,
            tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
            floor: float = DEFAULT_FLOOR, index: int = 1, t: float | None = None,
            domain_radius: float | None = None, compensate: bool = True) -> CgoSolution:
    """Picard iteration for the remainder of the CGO solution with ``zeta_index``.

    The mollification scale is ``t = s`` unless overridden.  Raises
    :class:`NonContractiveError` when the step ratio is at least 1 for three
    consecutive iterations and :class:`MaxIterError` when the tolerance is
    not met within ``max_iter`` iterations.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    g = log.grid
    s = zeta_params.s
    if s > g.resolution_limit:
        raise ValueError(f"s = {s} exceeds the grid resolution limit {g.resolution_limit:g}")
    t = s if t is None else t
    kernel = kernel or default_kernel(g.dim)
    pair = make_pair(log, t, kernel)
    zeta = zeta_params.zeta(index)
    prob = CgoProblem(log, pair, zeta, floor, compensate)
    w_hat = np.zeros(g.shape, complex)
    hist: list[float] = []
    bad = 0
    converged = False
    for n in range(max_iter):
        new = prob.apply(w_hat)
        d = prob.xnorm(new - w_hat)
        wn = prob.xnorm(new)
        hist.append(float(d))
        w_hat = new
        if not math.isfinite(d):
            raise NonContractiveError("iteration diverged to non-finite values", hist)
        if d <= tol * (1.0 + wn):
            converged = True
            break
        if n >= 1:
            bad = bad + 1 if d >= hist[-2] else 0
            if bad >= 3:
                raise NonContractiveError(
                    f"step ratio >= 1 for 3 consecutive iterations at s = {s:g}; s is too "
                    f"small for this conductivity", hist)
    if not converged:
        raise MaxIterError(f"tolerance {tol:g} not reached in {max_iter} iterations", hist)
    w = g.ifft(w_hat)
    res, rhs, res_fl = prob.equation_residual(w_hat)
    radius = log.support_radius if domain_radius is None else domain_radius
    record = dict(xdot_half=prob.xnorm(w_hat), **_domain_norms(g, w, radius, log.center))
    return CgoSolution(zeta_params, index, float(t), w, hist, record, True,
                       prob.op.floored_count, res, rhs, tol, floor, g, res_fl)


# --------------------------------------------------------------------------
# assembled CGO solutions
# --------------------------------------------------------------------------
@dataclass
class LogPolarField:
    """Complex field stored as ``exp(log_mag + i phase)`` to avoid overflow."""

    grid: PeriodicGrid
    log_mag: np.ndarray
    phase: np.ndarray

    def to_complex(self) -> np.ndarray:
        return np.exp(self.log_mag + 1j * self.phase)

    def __mul__(self, other: "LogPolarField") -> "LogPolarField":
        return LogPolarField(self.grid, self.log_mag + other.log_mag, self.phase + other.phase)

    def scaled(self, log_factor: np.ndarray) -> np.ndarray:
        """``exp(log_factor) * field`` as an ordinary complex array."""
        return np.exp(self.log_mag + log_factor + 1j * self.phase)


def _check_magnitude(grid, s):
    if s * grid.half_length > 600:
        raise ValueError(f"s*L = {s * grid.half_length:g} exceeds the representable range 600")


def build_cgo(log: LogData, kernel: MollifierKernel | None, solution: CgoSolution,
              pair: MollifiedPair | None = None) -> LogPolarField:
    """``u = exp(-phi_t/2) exp(x.zeta) (1 + w)`` in log-magnitude/phase form."""
    if not solution.converged:
        raise ValueError("solution has not converged")
    g = log.grid
    _check_magnitude(g, solution.params.s)
    pair = pair or make_pair(log, solution.t_scale, kernel or default_kernel(g.dim))
    z = solution.zeta
    xz_re = sum(x * zj.real for x, zj in zip(g.coords, z))
    xz_im = sum(x * zj.imag for x, zj in zip(g.coords, z))
    one_w = 1.0 + solution.w
    with np.errstate(divide="ignore"):
        lm = -0.5 * pair.phi_t + xz_re + np.log(np.abs(one_w))
    ph = xz_im + np.angle(one_w)
    return LogPolarField(g, np.broadcast_to(lm, g.shape).copy(), np.broadcast_to(ph, g.shape).copy())


def cgo_equation_residual(log: LogData, kernel, solution: CgoSolution, radius: float | None = None,
                          pair: MollifiedPair | None = None) -> dict:
    """Relative residual of ``(-Lap - A.grad) u`` on the inner domain.

    Writing ``u = exp(x.zeta) F`` with the periodic factor
    ``F = exp(-phi_t/2)(1 + w)``, the residual divided by ``exp(x.zeta)`` is
    ``-Lap F - 2 zeta.grad F - (zeta.zeta) F - A.(zeta F + grad F)``, evaluated
    with spectral derivatives.  It is normalised by ``|zeta|^2 ||F||`` on the
    ball of the given radius.
    """
    g = log.grid
    pair = pair or make_pair(log, solution.t_scale, kernel or default_kernel(g.dim))
    z = solution.zeta
    f = np.exp(-0.5 * pair.phi_t) * (1.0 + solution.w)
    grad_f = g.gradient(f)
    lap_f = g.laplacian(f)
    res = -lap_f - 2 * np.tensordot(z, grad_f, axes=(0, 0)) - (z @ z) * f
    res = res - sum(log.a_field[j] * (z[j] * f + grad_f[j]) for j in range(g.dim))
    radius = log.support_radius if radius is None else radius
    if radius <= 0:
        radius = 0.5 * VALIDITY_FRACTION * g.half_length
    mask = g.radius(log.center) <= radius
    zn2 = float(np.vdot(z, z).real)
    scale = zn2 * g.l2_norm(f * mask)
    value = g.l2_norm(res * mask)
    return dict(residual=value, scale=scale, relative=value / scale)


# --------------------------------------------------------------------------
# decay sweeps
# --------------------------------------------------------------------------
DECAY_SERIES = (
    # name, exponent of s, rule, tolerance
    ("xdot_half", 0.0, "decreasing", 0.0),
    ("l2_on_domain", 0.5, "bounded", 3.0),
    ("h1_on_domain", -0.5, "bounded", 3.0),
    ("h2_on_domain", -1.5, "bounded", 3.0),
)


def decay_sweep(log: LogData, kernel, k, s_values, directions, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER, floor: float = DEFAULT_FLOOR,
                strict: bool = True, keep_solutions: bool = False) -> RateTable:
    """Median-over-directions remainder norms across an ``s`` sweep.

    ``directions`` is a list of ``(eta1, eta2)`` pairs orthogonal to ``k``.
    Samples whose solve fails are marked in the table (which is then
    partial) and excluded from the verdicts' data.
    """
    s_values = list(s_values)
    if len(s_values) < 4:
        raise ValueError("a decay sweep needs at least 4 s values")
    lim = log.grid.resolution_limit
    if max(s_values) > lim:
        raise ValueError(f"largest s = {max(s_values):g} exceeds the grid resolution limit {lim:g}")
    table = RateTable(parameter="s")
    for name, e, rule, tl in DECAY_SERIES:
        table.add_series(name, e, rule, tl, strict=strict)
    details = []
    kernel = kernel or default_kernel(log.grid.dim)
    for s in s_values:
        recs, errors = [], []
        for e1, e2 in directions:
            params = make_zeta_pair(k, s, e1, e2)
            try:
                sol = solve_w(log, kernel, params, tol, max_iter, floor)
            except CgoSolverError as exc:
                errors.append(f"{exc.code}: {exc}")
                continue
            recs.append(sol.norm_record)
            details.append(dict(s=s, eta1=list(map(float, e1)), iterations=sol.iterations,
                                max_ratio=max(sol.contraction_ratios, default=0.0),
                                floored_count=sol.floored_count, **sol.norm_record))
        if not recs:
            table.mark_failed(s, "; ".join(errors))
            continue
        for name, *_ in DECAY_SERIES:
            table.record(name, s, float(np.median([r[name] for r in recs])))
        if errors:
            table.meta.setdefault("direction_failures", []).append(dict(s=s, errors=errors))
    table.meta["samples"] = details
    return table
