"""Cell-centred finite volumes for ``div(gamma grad u) = 0`` on a box.

Unknowns sit at cell centres; Dirichlet data live at the centres of the
boundary faces.  Interior faces carry the harmonic mean of the adjacent cell
conductivities, boundary faces the conductivity at the face centre over the
half-cell distance.  The boundary flux ``gamma d_nu u`` is
``T_b (f - u_cell) / area``, which makes the discrete DN map the Schur
complement of a symmetric positive definite matrix: it is exactly symmetric
and conserves flux.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .conductivity import Conductivity
from .rates import RateTable

__all__ = [
    "SolverError",
    "FdDomain",
    "DnResult",
    "FvOperator",
    "solve_dirichlet",
    "dn_apply",
    "identity_residual",
    "boundary_decay_sweep",
]

SOLVER_RTOL = 1e-10


class SolverError(RuntimeError):
    """Linear solver failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True, eq=False)
class FdDomain:
    """Axis-aligned box ``center +- half_width`` split into ``cells`` cubes per axis.

    Boundary faces are ordered axis by axis, the lower face before the upper,
    each in C order over the remaining axes.
    """

    center: tuple
    half_width: float
    cells: int
    eta: tuple = (0.0, 0.0, 1.0)
    epsilon: float = 0.0

    def __post_init__(self):
        if self.cells < 2:
            raise ValueError("need at least two cells per axis")
        if self.half_width <= 0:
            raise ValueError("half_width must be positive")
        e = np.asarray(self.eta, float)
        if e.size != len(self.center) or not np.isclose(np.linalg.norm(e), 1.0):
            raise ValueError("eta must be a unit vector of the domain's dimension")

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.cells

    @property
    def shape(self) -> tuple:
        return (self.cells,) * self.dim

    @property
    def n_cells(self) -> int:
        return self.cells**self.dim

    @property
    def face_area(self) -> float:
        return self.h ** (self.dim - 1)

    @cached_property
    def axes(self) -> list[np.ndarray]:
        return [c - self.half_width + (np.arange(self.cells) + 0.5) * self.h for c in self.center]

    @cached_property
    def cell_centers(self) -> np.ndarray:
        """Cell-centre coordinates, shape ``(*shape, dim)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @cached_property
    def _faces(self):
        d, n = self.dim, self.cells
        idx = np.arange(self.n_cells).reshape(self.shape)
        pts, nrm, cell = [], [], []
        for j in range(d):
            for side in (-1, 1):
                sl = [slice(None)] * d
                sl[j] = 0 if side < 0 else n - 1
                c_idx = idx[tuple(sl)].ravel()
                p = self.cell_centers[tuple(sl)].reshape(-1, d).copy()
                p[:, j] = self.center[j] + side * self.half_width
                v = np.zeros((len(p), d))
                v[:, j] = side
                pts.append(p)
                nrm.append(v)
                cell.append(c_idx)
        return np.concatenate(pts), np.concatenate(nrm), np.concatenate(cell)

    @property
    def face_points(self) -> np.ndarray:
        return self._faces[0]

    @property
    def face_normals(self) -> np.ndarray:
        return self._faces[1]

    @property
    def face_cells(self) -> np.ndarray:
        """Flat index of the cell adjacent to each boundary face."""
        return self._faces[2]

    @property
    def n_faces(self) -> int:
        return len(self.face_cells)

    @property
    def plus_mask(self) -> np.ndarray:
        """Faces with ``nu . eta >= epsilon``."""
        return self.face_normals @ np.asarray(self.eta, float) >= self.epsilon

    @property
    def minus_mask(self) -> np.ndarray:
        return ~self.plus_mask

    def boundary_data(self, f) -> np.ndarray:
        """Evaluate a callable on face centres, or validate an array of face values."""
        if callable(f):
            return np.asarray(f(self.face_points))
        v = np.asarray(f)
        if v.shape != (self.n_faces,):
            raise ValueError(f"boundary data must have {self.n_faces} entries")
        return v

    def contains_ball(self, center, radius) -> bool:
        c = np.asarray(center, float)
        lo = np.asarray(self.center) - self.half_width
        hi = np.asarray(self.center) + self.half_width
        return bool(np.all(c - radius > lo) and np.all(c + radius < hi))

    def refined(self, factor: int = 2) -> "FdDomain":
        return FdDomain(self.center, self.half_width, self.cells * factor, self.eta, self.epsilon)


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


class FvOperator:
    """Assembled finite-volume operator for one conductivity on one box.

    Attributes
    ----------
    K : sparse matrix
        SPD interior matrix, ``K u = B f`` is the discrete Dirichlet problem.
    tb : ndarray
        Boundary-face transmissibilities.
    """

    def __init__(self, gamma: Conductivity | Callable, dom: FdDomain):
        self.dom = dom
        ev = gamma.evaluate if hasattr(gamma, "evaluate") else gamma
        d, n, h = dom.dim, dom.cells, dom.h
        self.gamma_cells = np.asarray(ev(dom.cell_centers), float)
        self.gamma_faces = np.asarray(ev(dom.face_points), float)
        if np.any(self.gamma_cells <= 0) or np.any(self.gamma_faces <= 0):
            raise ValueError("conductivity must be positive on the closed box")
        idx = np.arange(dom.n_cells).reshape(dom.shape)
        rows, cols, vals = [], [], []
        diag = np.zeros(dom.n_cells)
        scale = h ** (d - 2)
        for j in range(d):
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[j] = slice(0, n - 1)
            hi[j] = slice(1, n)
            i0, i1 = idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()
            t = scale * _harmonic(self.gamma_cells[tuple(lo)].ravel(), self.gamma_cells[tuple(hi)].ravel())
            rows += [i0, i1]
            cols += [i1, i0]
            vals += [-t, -t]
            np.add.at(diag, i0, t)
            np.add.at(diag, i1, t)
        self.tb = 2.0 * scale * self.gamma_faces
        np.add.at(diag, dom.face_cells, self.tb)
        rows.append(np.arange(dom.n_cells))
        cols.append(np.arange(dom.n_cells))
        vals.append(diag)
        self.K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(dom.n_cells, dom.n_cells))
        self.B = sp.csr_matrix((self.tb, (dom.face_cells, np.arange(dom.n_faces))),
                               shape=(dom.n_cells, dom.n_faces))
        self._lu = None

    # ---------------------------------------------------------------- solving
    def solve(self, f: np.ndarray, direct: bool = False, rtol: float = SOLVER_RTOL) -> np.ndarray:
        """Interior values for Dirichlet data ``f`` on the boundary faces."""
        b = self.B @ f
        if direct:
            if self._lu is None:
                self._lu = spla.splu(self.K.tocsc())
            if np.iscomplexobj(b):
                return self._lu.solve(b.real) + 1j * self._lu.solve(b.imag)
            return self._lu.solve(b)
        if np.iscomplexobj(b):
            return self._cg(b.real, rtol) + 1j * self._cg(b.imag, rtol)
        return self._cg(b, rtol)

    def _cg(self, b, rtol):
        nb = np.linalg.norm(b)
        if nb == 0:
            return np.zeros_like(b)
        dinv = 1.0 / self.K.diagonal()
        pre = spla.LinearOperator(self.K.shape, matvec=lambda x: dinv * x)
        x, info = spla.cg(self.K, b, rtol=rtol, atol=0.0, M=pre, maxiter=20 * self.dom.n_cells)
        res = np.linalg.norm(b - self.K @ x) / nb
        if info != 0 or res > 10 * rtol:
            raise SolverError(f"conjugate gradients stopped with relative residual {res:.2e}", res)
        return x

    def solve_zero_trace(self, rhs: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
        """Interior values for ``K u = rhs`` (homogeneous Dirichlet data)."""
        if np.iscomplexobj(rhs):
            return self._cg(rhs.real, rtol) + 1j * self._cg(rhs.imag, rtol)
        return self._cg(rhs, rtol)

    def flux(self, u: np.ndarray, f: np.ndarray) -> np.ndarray:
        """Outward ``gamma d_nu u`` on every boundary face."""
        return self.tb * (f - u[self.dom.face_cells]) / self.dom.face_area


@dataclass
class DnResult:
    """Dirichlet data, interior solution and boundary flux of one solve."""

    domain: FdDomain
    f: np.ndarray
    u: np.ndarray
    flux: np.ndarray
    operator: FvOperator = field(repr=False)

    @property
    def conservation_defect(self) -> float:
        """``|sum flux * area|`` relative to ``sum |flux| * area``."""
        a = self.domain.face_area
        total = np.sum(np.abs(self.flux)) * a
        return float(abs(np.sum(self.flux) * a) / total) if total > 0 else 0.0

    def to_csv(self) -> str:
        """Face-indexed CSV with coordinates, normal, data and flux."""
        buf = io.StringIO()
        w = csv.writer(buf)
        d = self.domain.dim
        w.writerow(["face"] + [f"x{j}" for j in range(d)] + [f"n{j}" for j in range(d)]
                   + ["f_re", "f_im", "flux_re", "flux_im", "plus"])
        plus = self.domain.plus_mask
        for i, (p, nv) in enumerate(zip(self.domain.face_points, self.domain.face_normals)):
            fv, fl = complex(self.f[i]), complex(self.flux[i])
            w.writerow([i, *map(repr, p), *map(int, nv), repr(fv.real), repr(fv.imag),
                        repr(fl.real), repr(fl.imag), int(plus[i])])
        return buf.getvalue()


def solve_dirichlet(gamma, dom: FdDomain, f, direct: bool = False,
                    operator: FvOperator | None = None) -> DnResult:
    """Solve ``div(gamma grad u) = 0`` with ``u = f`` on the boundary faces."""
    op = operator or FvOperator(gamma, dom)
    fv = dom.boundary_data(f)
    if not np.all(np.isfinite(fv)):
        raise ValueError("boundary data must be finite")
    u = op.solve(fv, direct=direct)
    return DnResult(dom, fv, u, op.flux(u, fv), op)


def dn_apply(gamma, dom: FdDomain, f, direct: bool = False,
             operator: FvOperator | None = None) -> np.ndarray:
    """Boundary flux ``gamma d_nu u`` for Dirichlet data ``f``."""
    return solve_dirichlet(gamma, dom, f, direct, operator).flux


# --------------------------------------------------------------------------
# boundary integral identity
# --------------------------------------------------------------------------
def _face_gradient_integral(dom: FdDomain, a_c, b_c, a_f, b_f, u_c, u_f) -> float:
    """Staggered midpoint rule for ``int (a grad b - b grad a) . grad u``.

    Normal derivatives live on faces; each interior face owns a dual volume
    ``h^d``, each boundary face half of it.  ``*_c`` are cell arrays, ``*_f``
    boundary-face arrays.
    """
    d, n, h = dom.dim, dom.cells, dom.h
    total = 0.0
    for j in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[j] = slice(0, n - 1)
        hi[j] = slice(1, n)
        lo, hi = tuple(lo), tuple(hi)
        am = 0.5 * (a_c[lo] + a_c[hi])
        bm = 0.5 * (b_c[lo] + b_c[hi])
        v = (am * (b_c[hi] - b_c[lo]) - bm * (a_c[hi] - a_c[lo])) / h
        du = (u_c[hi] - u_c[lo]) / h
        total = total + np.sum(v * du) * h**d
    cells = dom.face_cells
    side = dom.face_normals.sum(axis=1)  # +-1 along the face's axis
    a_in, b_in, u_in = a_c.ravel()[cells], b_c.ravel()[cells], u_c.ravel()[cells]
    # outward difference over the half cell, times the normal sign
    am = 0.5 * (a_in + a_f)
    bm = 0.5 * (b_in + b_f)
    v = side * (am * (b_f - b_in) - bm * (a_f - a_in)) / (0.5 * h)
    du = side * (u_f - u_in) / (0.5 * h)
    total = total + np.sum(v * du) * 0.5 * h**d
    return complex(total) if np.iscomplexobj(total) else float(total)


def identity_residual(gamma1, gamma2, dom: FdDomain, f1, f2, direct: bool = False) -> dict:
    """Both sides of the boundary integral identity for two conductivities.

    ``lhs = int (g1^1/2 grad g2^1/2 - g2^1/2 grad g1^1/2) . grad(u1 u2)``;
    ``rhs = sum_faces (Lambda1 f2 - (g1/g2) Lambda2 f2) f1 area``.
    """
    op1 = FvOperator(gamma1, dom)
    op2 = FvOperator(gamma2, dom)
    fv1, fv2 = dom.boundary_data(f1), dom.boundary_data(f2)
    u1 = op1.solve(fv1, direct)
    u2 = op2.solve(fv2, direct)
    ut = op1.solve(fv2, direct)
    lam1 = op1.flux(ut, fv2)
    lam2 = op2.flux(u2, fv2)
    rhs = np.sum((lam1 - op1.gamma_faces / op2.gamma_faces * lam2) * fv1) * dom.face_area
    a_c, b_c = np.sqrt(op1.gamma_cells), np.sqrt(op2.gamma_cells)
    a_f, b_f = np.sqrt(op1.gamma_faces), np.sqrt(op2.gamma_faces)
    prod_c = (u1 * u2).reshape(dom.shape)
    lhs = _face_gradient_integral(dom, a_c, b_c, a_f, b_f, prod_c, fv1 * fv2)
    rhs = complex(rhs) if np.iscomplexobj(rhs) else float(rhs)
    return dict(lhs=lhs, rhs=rhs, residual=float(abs(lhs - rhs)), h=dom.h)


# --------------------------------------------------------------------------
# boundary decay sweep
# --------------------------------------------------------------------------
DECAY_INTEGRALS = ("delta_u_s2", "grad_delta_u", "dnu_u_plus")


def _tensor_samples(grid, values, dom: FdDomain, derivative=None):
    """Trigonometric interpolant at the cell centres and the boundary-face centres."""
    cells = grid.interpolate_tensor(values, dom.axes, derivative)
    faces = []
    for j in range(dom.dim):
        for side in (-1, 1):
            axes = list(dom.axes)
            axes[j] = np.array([dom.center[j] + side * dom.half_width])
            faces.append(grid.interpolate_tensor(values, axes, derivative).ravel())
    return cells, np.concatenate(faces)


def boundary_decay_sweep(gamma1: Conductivity, gamma2: Conductivity, kernel, k, s_values,
                         dom: FdDomain, direction: tuple | None = None, tol: float = 1e-8,
                         floor: float = 1e-3, noise_floor: float = 1e-12,
                         rule_tol: float = 0.10) -> RateTable:
    """Weighted boundary integrals of the CGO comparison functions across ``s``.

    For each ``s`` the CGO solution ``u2 = exp(x.zeta) exp(-phi2_s/2)(1 + w)``
    of the ``gamma2`` equation with ``Re zeta = s eta`` is built on the
    spectral grid.  The ``gamma1`` solution with the trace of ``u2`` is written
    ``u1~ = u2 + d``, where ``d`` vanishes on the boundary and solves
    ``K1 d = -(K1 - K2) u2``; the right side lives where the conductivities
    differ, so no exponentially large right side enters the solve.  Recorded:

    * ``delta_u_s2``: ``s^2 int exp(-2s x.eta) |delta u|^2`` over the boundary,
      ``delta u = (exp(phi1_s/2) - exp(phi2_s/2)) u2``;
    * ``grad_delta_u``: ``int exp(-2s x.eta) |grad delta u|^2`` over the boundary;
    * ``dnu_u_plus``: ``int exp(-2s x.eta) |d_nu u|^2`` over the faces with
      ``nu.eta >= epsilon``, ``u = exp(phi1_s/2) u1~ - exp(phi2_s/2) u2``.

    Values below ``noise_floor`` times the matching integral built from ``u2``
    alone are stored as exact zeros (they are round-off).
    """
    from .bourgain import make_zeta_pair, sample_directions
    from .cgo import CgoSolverError, solve_w
    from .conductivity import log_data
    from .mollifier import default_kernel, make_pair

    grid = gamma1.grid
    kernel = kernel or default_kernel(grid.dim)
    eta = np.asarray(dom.eta, float)
    k = np.asarray(k, float)
    if abs(k @ eta) > 1e-10 * max(1.0, np.linalg.norm(k)):
        raise ValueError("k must be orthogonal to the domain direction eta")
    if direction is None:
        e2 = None
        for _, b in sample_directions(k, 8, seed=11):
            v = b - (b @ eta) * eta
            v = v - (v @ k) * k / max(k @ k, 1e-300)
            if np.linalg.norm(v) > 0.3:
                e2 = v / np.linalg.norm(v)
                break
        direction = (-eta, e2)
    # zeta2 = s eta + ... requires eta1 = -eta
    eta1, eta2 = (np.asarray(x, float) for x in direction)
    half = 0.8 * grid.half_length
    if np.any(np.abs(np.asarray(dom.center)) + dom.half_width >= half):
        raise ValueError("the FD box must lie inside the CGO validity cube")
    log1, log2 = log_data(gamma1), log_data(gamma2)
    op1 = FvOperator(gamma1, dom)
    op2 = FvOperator(gamma2, dom)
    if np.any(op1.gamma_faces != op2.gamma_faces):
        raise ValueError("the conductivities must agree on the boundary faces")
    dk = op1.K - op2.K
    dk.eliminate_zeros()
    area = dom.face_area
    pts = dom.face_points
    nu = dom.face_normals
    plus = dom.plus_mask
    xc = dom.cell_centers.reshape(-1, dom.dim)
    gf = op1.gamma_faces

    table = RateTable(parameter="s")
    for name in DECAY_INTEGRALS:
        table.add_series(name, 0.0, "top_half_nonincreasing", rule_tol)
    samples = []
    for s in s_values:
        params = make_zeta_pair(k, s, eta1, eta2)
        try:
            sol = solve_w(log2, kernel, params, tol=tol, floor=floor, index=2)
        except CgoSolverError as exc:
            table.mark_failed(s, f"{exc.code}: {exc}")
            continue
        z = params.zeta2
        pair1, pair2 = make_pair(log1, s, kernel), make_pair(log2, s, kernel)
        fper = np.exp(-0.5 * pair2.phi_t) * (1.0 + sol.w)
        f_c, f_f = _tensor_samples(grid, fper, dom)
        df_f = np.stack([_tensor_samples(grid, fper, dom, j)[1] for j in range(dom.dim)], -1)
        p1_f = _tensor_samples(grid, pair1.phi_t, dom)[1]
        p2_f = _tensor_samples(grid, pair2.phi_t, dom)[1]
        g1 = np.stack([_tensor_samples(grid, pair1.phi_t, dom, j)[1] for j in range(dom.dim)], -1)
        g2 = np.stack([_tensor_samples(grid, pair2.phi_t, dom, j)[1] for j in range(dom.dim)], -1)
        # scaled trace exp(-s x.eta) u2 = exp(i x.Im zeta) F and its gradient
        phase = np.exp(1j * (pts @ z.imag))
        u2s = phase * f_f
        grad_u2s = phase[:, None] * (f_f[:, None] * z[None, :] + df_f)
        e1, e2_ = np.exp(0.5 * p1_f), np.exp(0.5 * p2_f)
        diff = e1 - e2_
        grad_diff = 0.5 * (e1[:, None] * g1 - e2_[:, None] * g2)
        du = diff * u2s
        grad_du = grad_diff * u2s[:, None] + diff[:, None] * grad_u2s
        ref1 = s * s * area * np.sum(np.abs(u2s) ** 2)
        ref2 = area * np.sum(np.abs(grad_u2s) ** 2)
        i1 = s * s * area * np.sum(np.abs(du) ** 2)
        i2 = area * np.sum(np.abs(grad_du) ** 2)
        # correction d = u1~ - u2 with zero trace
        if dk.nnz:
            u2_c = np.exp(xc @ z) * f_c.ravel()
            d = op1.solve_zero_trace(-(dk @ u2_c))
            dnu_d = -op1.tb * d[dom.face_cells] / area / gf * np.exp(-s * (pts @ eta))
        else:
            dnu_d = np.zeros(dom.n_faces, complex)
        dnu_u2 = np.sum(grad_u2s * nu, axis=1)
        dnu = (e1 * (dnu_u2 + dnu_d) + 0.5 * e1 * np.sum(g1 * nu, axis=1) * u2s
               - e2_ * dnu_u2 - 0.5 * e2_ * np.sum(g2 * nu, axis=1) * u2s)
        i3 = area * np.sum(np.abs(dnu[plus]) ** 2)
        ref3 = area * np.sum(np.abs(dnu_u2[plus]) ** 2)
        for name, v, ref in zip(DECAY_INTEGRALS, (i1, i2, i3), (ref1, ref2, ref3)):
            table.record(name, s, float(v) if v > noise_floor * ref else 0.0)
        samples.append(dict(s=float(s), iterations=sol.iterations, raw=[float(i1), float(i2), float(i3)],
                            reference=[float(ref1), float(ref2), float(ref3)]))
    table.meta["samples"] = samples
    table.meta["direction"] = dict(eta1=eta1.tolist(), eta2=eta2.tolist())
    return table
