"""Complex null vectors, the symbol of the conjugated Laplacian and Bourgain norms.

For a complex vector ``zeta`` with ``zeta . zeta = 0`` (bilinear product, no
conjugation) the conjugated Laplacian ``exp(-x.zeta) Lap exp(x.zeta) =
Lap + 2 zeta . grad`` has symbol ``P(xi) = -|xi|^2 + 2i zeta.xi``.  Bourgain
norms weight Fourier coefficients by powers of ``|P|``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .grid import PeriodicGrid, ScalarField

__all__ = [
    "CgoParameters",
    "make_zeta_pair",
    "zeta_scale",
    "symbol_p",
    "symbol_on_grid",
    "ZetaOperator",
    "BourgainWeight",
    "bourgain_norm",
    "inv_laplacian_zeta",
    "smooth_step",
    "radial_cutoff",
    "LocalizationReport",
    "localization_check",
    "sample_directions",
]

DEFAULT_FLOOR = 1e-3


@dataclass(frozen=True)
class CgoParameters:
    """The pair ``zeta_1 = s eta1 + i(k/2 + r eta2)``, ``zeta_2 = -s eta1 + i(k/2 - r eta2)``.

    Both vectors are null and ``zeta_1 + zeta_2 = i k``.
    """

    k: np.ndarray
    s: float
    r: float
    eta1: np.ndarray
    eta2: np.ndarray
    zeta1: np.ndarray
    zeta2: np.ndarray

    def zeta(self, index: int) -> np.ndarray:
        if index not in (1, 2):
            raise ValueError("index must be 1 or 2")
        return self.zeta1 if index == 1 else self.zeta2

    def to_dict(self) -> dict:
        c = lambda z: [[float(v.real), float(v.imag)] for v in z]  # noqa: E731
        return dict(k=self.k.tolist(), s=self.s, r=self.r, eta1=self.eta1.tolist(),
                    eta2=self.eta2.tolist(), zeta1=c(self.zeta1), zeta2=c(self.zeta2))


def make_zeta_pair(k, s: float, eta1, eta2, tol: float = 1e-10) -> CgoParameters:
    """Build the null pair from a frequency ``k`` and orthonormal directions.

    Requires ``eta1``, ``eta2`` unit, mutually orthogonal, both orthogonal to
    ``k``, and ``s >= |k|/2``.
    """
    k = np.asarray(k, float)
    e1 = np.asarray(eta1, float)
    e2 = np.asarray(eta2, float)
    if not (k.shape == e1.shape == e2.shape):
        raise ValueError("k, eta1 and eta2 must have the same dimension")
    for name, e in (("eta1", e1), ("eta2", e2)):
        if abs(np.linalg.norm(e) - 1.0) > tol:
            raise ValueError(f"{name} must be a unit vector")
    kn = max(np.linalg.norm(k), 1.0)
    if abs(e1 @ e2) > tol or abs(e1 @ k) > tol * kn or abs(e2 @ k) > tol * kn:
        raise ValueError("eta1, eta2 and k must be mutually orthogonal")
    if not s > 0:
        raise ValueError("s must be positive")
    disc = s * s - 0.25 * (k @ k)
    if disc < -tol * s * s:
        raise ValueError(f"s = {s} is below |k|/2 = {0.5 * np.linalg.norm(k)}")
    r = float(np.sqrt(max(disc, 0.0)))
    z1 = s * e1 + 1j * (0.5 * k + r * e2)
    z2 = -s * e1 + 1j * (0.5 * k - r * e2)
    return CgoParameters(k, float(s), r, e1, e2, z1, z2)


def zeta_scale(zeta) -> float:
    """``s = |Re zeta|``; for a null vector also ``|Im zeta|``."""
    return float(np.linalg.norm(np.real(zeta)))


def check_null(zeta, tol: float = 1e-12) -> None:
    z = np.asarray(zeta, complex)
    if abs(z @ z) > tol * max(np.vdot(z, z).real, 1e-300):
        raise ValueError("zeta is not a null vector (zeta.zeta != 0)")


def symbol_p(zeta, xi) -> np.ndarray:
    """``P(xi) = -|xi|^2 + 2i zeta.xi`` for frequency vectors ``xi`` of shape ``(..., dim)``."""
    z = np.asarray(zeta, complex)
    xi = np.asarray(xi, float)
    return -np.sum(xi**2, axis=-1) + 2j * (xi @ z)


def symbol_on_grid(grid: PeriodicGrid, zeta) -> np.ndarray:
    """``P`` on the lattice, built from the differentiation wavenumbers.

    With the Nyquist derivative zeroed, this is the exact symbol of the grid
    operator ``laplacian + 2 zeta . gradient``.
    """
    z = np.asarray(zeta, complex)
    p = np.zeros(grid.shape, complex)
    for kj, zj in zip(grid.dfreqs, z):
        p = p - kj**2 + 2j * zj * kj
    return p


class ZetaOperator:
    """Pre-computed symbol data for one ``zeta`` on one grid.

    Parameters
    ----------
    floor : float
        Relative modulus floor ``eps_f``; modes with ``|P| < eps_f s`` are
        divided by ``eps_f s`` times the phase of ``P`` instead of ``P``.
    """

    def __init__(self, grid: PeriodicGrid, zeta, floor: float = DEFAULT_FLOOR):
        check_null(zeta, 1e-10)
        self.grid = grid
        self.zeta = np.asarray(zeta, complex)
        self.s = zeta_scale(zeta)
        self.floor = float(floor)
        self.p = symbol_on_grid(grid, zeta)
        self.abs_p = np.abs(self.p)
        scale = self.s if self.s > 0 else 1.0
        if self.floor > 0:
            self.floored = self.abs_p < self.floor * scale
        else:
            self.floored = np.zeros(grid.shape, bool)
            if np.any(self.abs_p < 1e-12 * scale**2):
                raise ValueError("zero-symbol lattice modes require a positive floor")
        phase = np.where(self.abs_p > 0, self.p / np.where(self.abs_p > 0, self.abs_p, 1), 1.0)
        self.p_reg = np.where(self.floored, self.floor * scale * phase, self.p)
        self.floored_count = int(self.floored.sum())

    def inverse_hat(self, c: np.ndarray) -> np.ndarray:
        return c / self.p_reg

    def forward_hat(self, c: np.ndarray) -> np.ndarray:
        return self.p * c

    def weight(self, b: float, homogeneous: bool = True) -> np.ndarray:
        if homogeneous:
            if b < 0:
                if self.floor == 0 and np.any(self.abs_p == 0):
                    raise ValueError("negative homogeneous exponent needs a positive floor")
                base = np.maximum(self.abs_p, self.floor * self.s)
            else:
                base = self.abs_p
            return base**b
        zn = float(np.sqrt(np.vdot(self.zeta, self.zeta).real))
        return (zn + self.abs_p) ** b

    def norm_hat(self, c: np.ndarray, b: float, homogeneous: bool = True) -> float:
        w = self.weight(b, homogeneous)
        return float(np.sqrt(self.grid.volume * np.sum((w * np.abs(c)) ** 2)))


@dataclass(frozen=True)
class BourgainWeight:
    """Fourier weight ``|P|^b`` (homogeneous) or ``(|zeta| + |P|)^b``."""

    zeta: np.ndarray
    b: float
    homogeneous: bool = True
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        check_null(self.zeta)
        if not -1.0 <= self.b <= 1.0:
            raise ValueError("Bourgain exponent must lie in [-1, 1]")
        if self.floor < 0:
            raise ValueError("floor must be non-negative")


def _as_array(u, grid):
    if isinstance(u, ScalarField):
        return u.physical(), u.grid
    if grid is None:
        raise ValueError("grid is required for raw arrays")
    return np.asarray(u), grid


def bourgain_norm(u, weight: BourgainWeight, grid: PeriodicGrid | None = None) -> float:
    """Norm of ``u`` in the Bourgain space described by ``weight``."""
    v, g = _as_array(u, grid)
    op = ZetaOperator(g, weight.zeta, weight.floor if weight.floor > 0 else 0.0) \
        if weight.floor > 0 else _unfloored(g, weight.zeta)
    return op.norm_hat(g.fft(v), weight.b, weight.homogeneous)


def _unfloored(grid, zeta):
    op = ZetaOperator.__new__(ZetaOperator)
    op.grid, op.zeta, op.s, op.floor = grid, np.asarray(zeta, complex), zeta_scale(zeta), 0.0
    op.p = symbol_on_grid(grid, zeta)
    op.abs_p = np.abs(op.p)
    return op


def inv_laplacian_zeta(f, zeta, floor: float = DEFAULT_FLOOR, grid=None):
    """Solve ``(Lap + 2 zeta.grad) u = f`` mode by mode.

    Returns
    -------
    u : ScalarField or ndarray
        Same kind as ``f``.
    floored_count : int
        Number of lattice modes whose symbol modulus was raised to the floor.
    """
    v, g = _as_array(f, grid)
    op = ZetaOperator(g, zeta, floor)
    out = g.ifft(op.inverse_hat(g.fft(v)))
    if isinstance(f, ScalarField):
        return ScalarField(g, out), op.floored_count
    return out, op.floored_count


# --------------------------------------------------------------------------
# cutoffs and localisation
# --------------------------------------------------------------------------
def smooth_step(x) -> np.ndarray:
    """C-infinity step: 1 for ``x <= 0``, 0 for ``x >= 1``."""
    x = np.asarray(x, float)

    def f(y):
        out = np.zeros_like(y)
        m = y > 0
        out[m] = np.exp(-1.0 / y[m])
        return out

    a, b = f(1.0 - x), f(x)
    return a / (a + b)


def radial_cutoff(grid: PeriodicGrid, inner: float, outer: float, center=None) -> np.ndarray:
    """Radial cutoff equal to 1 for ``|x - c| <= inner`` and 0 beyond ``outer``."""
    if not 0 < inner < outer:
        raise ValueError("need 0 < inner < outer")
    r = grid.radius(center)
    return smooth_step((r - inner) / (outer - inner))


RATIO_NAMES = (
    "xdot_minus_half",  # ||u_B||_{Xdot^-1/2} / ||u||_{X^-1/2}
    "x_half",           # ||u_B||_{X^1/2} / ||u||_{Xdot^1/2}
    "l2_scaled",        # s^1/2 ||u_B||_{L2} / ||u||_{Xdot^1/2}
    "h_half",           # ||u_B||_{H^1/2} / ||u||_{Xdot^1/2}
    "h1_scaled",        # ||u_B||_{H^1} / (s^1/2 ||u||_{Xdot^1/2})
)


@dataclass
class LocalizationReport:
    s: float
    ratios: dict = field(default_factory=dict)
    floored_count: int = 0

    def records(self) -> list[dict]:
        return [dict(ratio_name=n, s=self.s, value=v) for n, v in self.ratios.items()]

    def to_json(self) -> str:
        return json.dumps(self.records())


def localization_check(u, cutoff, zeta, floor: float = DEFAULT_FLOOR,
                       grid: PeriodicGrid | None = None) -> LocalizationReport:
    """Ratios comparing the cut-off field ``u_B = cutoff * u`` with ``u``."""
    v, g = _as_array(u, grid)
    phi = cutoff.physical() if isinstance(cutoff, ScalarField) else np.asarray(cutoff)
    op = ZetaOperator(g, zeta, floor)
    s = op.s
    c = g.fft(v)
    cb = g.fft(phi * v)
    den_x = op.norm_hat(c, -0.5, homogeneous=False)
    den_xd = op.norm_hat(c, 0.5, homogeneous=True)
    if den_x == 0 or den_xd == 0:
        raise ValueError("u has zero norm in the reference Bourgain space")
    vol = g.volume

    def sob(cc, order):
        return float(np.sqrt(vol * np.sum((g.sobolev_weight(order) * np.abs(cc)) ** 2)))

    ratios = {
        "xdot_minus_half": op.norm_hat(cb, -0.5, True) / den_x,
        "x_half": op.norm_hat(cb, 0.5, False) / den_xd,
        "l2_scaled": np.sqrt(s) * sob(cb, 0.0) / den_xd,
        "h_half": sob(cb, 0.5) / den_xd,
        "h1_scaled": sob(cb, 1.0) / (np.sqrt(s) * den_xd),
    }
    return LocalizationReport(s, {k: float(x) for k, x in ratios.items()}, op.floored_count)


def sample_directions(k, n: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Random orthonormal pairs ``(eta1, eta2)`` orthogonal to ``k``.

    Directions come from random rotations, so their direction cosines are
    generic and avoid alignment with the frequency lattice.
    """
    k = np.asarray(k, float)
    rng = np.random.default_rng(seed)
    if k.shape[0] != 3:
        if np.any(k):
            raise ValueError("in two dimensions only k = 0 admits an orthonormal pair")
        out = []
        for _ in range(n):
            th = rng.uniform(0, 2 * np.pi)
            out.append((np.array([np.cos(th), np.sin(th)]), np.array([-np.sin(th), np.cos(th)])))
        return out
    rots = Rotation.random(n, random_state=rng)
    mats = rots.as_matrix().reshape(n, 3, 3)
    if np.linalg.norm(k) < 1e-12:
        return [(m[:, 0].copy(), m[:, 1].copy()) for m in mats]
    kh = k / np.linalg.norm(k)
    out = []
    for m in mats:
        a = m[:, 0] - (m[:, 0] @ kh) * kh
        a /= np.linalg.norm(a)
        out.append((a, np.cross(kh, a)))
    return out


def generic_k(norm: float, seed: int = 0) -> np.ndarray:
    """A frequency vector of given length with generic direction cosines."""
    v = Rotation.random(random_state=np.random.default_rng(seed + 7919)).apply([0.0, 0.0, 1.0])
    return norm * v
