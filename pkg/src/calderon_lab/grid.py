"""Periodic grids, spectral transforms, derivatives and norms.

The computational domain is the torus ``[-L, L)^d`` sampled on ``N`` points
per axis.  Spectral coefficients are normalised so that a constant field
``c`` has coefficient ``c`` at the zero frequency, i.e. ``f_hat = fftn(f) / N**d``.
With this convention Parseval reads ``||f||_2^2 = V * sum |f_hat|^2`` where
``V = (2L)^d`` is the torus volume.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "PeriodicGrid",
    "ScalarField",
    "VectorField",
    "make_grid",
    "to_spectral",
    "to_physical",
    "gradient",
    "sobolev_norm",
    "l2_norm",
    "sup_norm",
    "save_field",
    "load_field",
    "field_to_json",
    "field_from_json",
]

PHYSICAL = "physical"
SPECTRAL = "spectral"
_REPRESENTATIONS = (PHYSICAL, SPECTRAL)

# number of FFT workers used by every transform; changed by ``set_workers``
_WORKERS = 1


def set_workers(n: int) -> None:
    """Set the number of threads used by the FFT backend."""
    global _WORKERS
    _WORKERS = max(1, int(n))


@dataclass(frozen=True, eq=False)
class PeriodicGrid:
    """Uniform grid on the torus ``[-L, L)^dim``.

    Parameters
    ----------
    dim : int
        Spatial dimension, 2 or 3.
    points_per_axis : int
        Number of samples per axis, even and at least 8.
    half_length : float
        Half side length ``L`` of the periodic cell.
    """

    dim: int
    points_per_axis: int
    half_length: float

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        n = self.points_per_axis
        if int(n) != n or n < 8 or n % 2:
            raise ValueError(f"points_per_axis must be an even integer >= 8, got {n}")
        if not self.half_length > 0:
            raise ValueError(f"half_length must be positive, got {self.half_length}")

    # ------------------------------------------------------------------ geometry
    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_length / self.points_per_axis

    @property
    def volume(self) -> float:
        return (2.0 * self.half_length) ** self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def size(self) -> int:
        return self.points_per_axis**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        """1-D sample coordinates ``-L + j h``."""
        return -self.half_length + self.spacing * np.arange(self.points_per_axis)

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Broadcastable coordinate arrays, one per axis."""
        out = []
        for j in range(self.dim):
            shp = [1] * self.dim
            shp[j] = self.points_per_axis
            out.append(self.axis.reshape(shp))
        return tuple(out)

    def mesh(self) -> np.ndarray:
        """Dense coordinates of shape ``(dim, N, ..., N)``."""
        return np.stack(np.broadcast_arrays(*self.coords))

    def radius(self, center: Sequence[float] | None = None) -> np.ndarray:
        """Euclidean distance of every grid point to ``center``."""
        c = np.zeros(self.dim) if center is None else np.asarray(center, float)
        return np.sqrt(sum((x - cj) ** 2 for x, cj in zip(self.coords, c)))

    # ---------------------------------------------------------------- frequencies
    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """1-D angular frequencies ``(pi/L) m`` in FFT order."""
        n = self.points_per_axis
        return (np.pi / self.half_length) * np.fft.fftfreq(n, d=1.0 / n)

    @cached_property
    def derivative_wavenumbers(self) -> np.ndarray:
        """Wavenumbers used for differentiation; the Nyquist entry is zeroed."""
        k = self.wavenumbers.copy()
        k[self.points_per_axis // 2] = 0.0
        return k

    def _broadcast(self, k1: np.ndarray, j: int) -> np.ndarray:
        shp = [1] * self.dim
        shp[j] = self.points_per_axis
        return k1.reshape(shp)

    @cached_property
    def freqs(self) -> tuple[np.ndarray, ...]:
        """Broadcastable frequency arrays ``xi_j`` (Nyquist kept, value ``-pi N/(2L)``)."""
        return tuple(self._broadcast(self.wavenumbers, j) for j in range(self.dim))

    @cached_property
    def dfreqs(self) -> tuple[np.ndarray, ...]:
        """Broadcastable differentiation wavenumbers (Nyquist zeroed)."""
        return tuple(self._broadcast(self.derivative_wavenumbers, j) for j in range(self.dim))

    @cached_property
    def freq_norm2(self) -> np.ndarray:
        """``|xi|^2`` on the full lattice."""
        return sum(np.broadcast_to(k**2, self.shape) for k in self.freqs)

    @property
    def nyquist(self) -> float:
        """Largest resolved angular frequency per axis, ``pi N / (2L)``."""
        return np.pi * self.points_per_axis / (2.0 * self.half_length)

    @property
    def resolution_limit(self) -> float:
        """Largest admissible scale parameter ``t`` or ``s`` for sweeps.

        Equal to twice the per-axis Nyquist frequency.  At this scale the
        mollifier multiplier ``Psi_hat(xi/t)`` is still far from its decay
        range on the lattice and CGO exponentials ``exp(s x.eta)`` are
        representable through the log-magnitude form.
        """
        return 2.0 * self.nyquist

    # ---------------------------------------------------------------- transforms
    def fft(self, values: np.ndarray) -> np.ndarray:
        """Normalised forward transform over the last ``dim`` axes."""
        axes = tuple(range(-self.dim, 0))
        return sfft.fftn(values, axes=axes, workers=_WORKERS) / self.size

    def ifft(self, coeffs: np.ndarray, real: bool = False) -> np.ndarray:
        """Inverse of :meth:`fft`; ``real=True`` discards the imaginary part."""
        axes = tuple(range(-self.dim, 0))
        out = sfft.ifftn(coeffs * self.size, axes=axes, workers=_WORKERS)
        return out.real if real else out

    # --------------------------------------------------------------- derivatives
    def gradient(self, values: np.ndarray) -> np.ndarray:
        """Spectral gradient, returned with shape ``(dim, *shape)``."""
        c = self.fft(values)
        real = np.isrealobj(values)
        return np.stack([self.ifft(1j * k * c, real=real) for k in self.dfreqs])

    def gradient_hat(self, coeffs: np.ndarray) -> np.ndarray:
        return np.stack([1j * k * coeffs for k in self.dfreqs])

    def divergence(self, vec: np.ndarray) -> np.ndarray:
        real = np.isrealobj(vec)
        c = sum(1j * k * self.fft(v) for k, v in zip(self.dfreqs, vec))
        return self.ifft(c, real=real)

    def laplacian(self, values: np.ndarray) -> np.ndarray:
        """Spectral Laplacian, consistent with ``divergence(gradient(.))``."""
        c = self.fft(values)
        lap = -sum(k**2 for k in self.dfreqs)
        return self.ifft(lap * c, real=np.isrealobj(values))

    def hessian(self, values: np.ndarray) -> np.ndarray:
        """All second derivatives, shape ``(dim, dim, *shape)``."""
        c = self.fft(values)
        real = np.isrealobj(values)
        d = self.dim
        out = np.empty((d, d) + self.shape, dtype=float if real else complex)
        for i in range(d):
            for j in range(i, d):
                out[i, j] = self.ifft(-self.dfreqs[i] * self.dfreqs[j] * c, real=real)
                out[j, i] = out[i, j]
        return out

    # ---------------------------------------------------------------------- norms
    def l2_norm(self, values: np.ndarray) -> float:
        """Volume-weighted root sum of squares over the grid."""
        return float(np.sqrt(self.cell_volume * np.sum(np.abs(values) ** 2)))

    def sobolev_weight(self, order: float, homogeneous: bool = False) -> np.ndarray:
        if order < 0:
            raise ValueError(f"Sobolev order must be non-negative, got {order}")
        if homogeneous:
            return np.sqrt(self.freq_norm2) ** order
        return (1.0 + self.freq_norm2) ** (0.5 * order)

    def sobolev_norm(self, values: np.ndarray, order: float, homogeneous: bool = False) -> float:
        """``sqrt(V sum w(xi)^2 |f_hat|^2)`` with the Bessel or Riesz weight."""
        w = self.sobolev_weight(order, homogeneous)
        c = self.fft(values)
        return float(np.sqrt(self.volume * np.sum((w * np.abs(c)) ** 2)))

    # -------------------------------------------------------------- interpolation
    def _phase_matrix(self, x: np.ndarray, derivative: bool = False) -> np.ndarray:
        """Matrix ``E[p, m]`` evaluating 1-D trigonometric modes at ``x[p]``.

        The Nyquist mode is split symmetrically between ``+-N/2`` so that the
        interpolant of real data is real; with ``derivative=True`` the matrix
        evaluates derivatives of the modes, with the Nyquist one zeroed just
        like the spectral derivative.
        """
        k = self.wavenumbers
        nq = self.points_per_axis // 2
        xs = (np.asarray(x, float) + self.half_length)[:, None]
        e = np.exp(1j * xs * k[None, :])
        # sample coordinates start at -L, which the FFT treats as the origin
        if derivative:
            e = e * (1j * k[None, :])
            e[:, nq] = 0.0
        else:
            e[:, nq] = np.cos(xs[:, 0] * k[nq])
        return e

    def interpolate(self, values: np.ndarray, points: np.ndarray, chunk: int = 512,
                    derivative: int | None = None) -> np.ndarray:
        """Trigonometric interpolant of grid data at scattered points.

        Parameters
        ----------
        values : ndarray
            Grid samples; a leading batch axis is allowed.
        points : ndarray, shape (P, dim)
        derivative : int, optional
            If given, evaluate the partial derivative along this axis instead.
        """
        pts = np.atleast_2d(np.asarray(points, float))
        coeffs = self.fft(values)
        return self.interpolate_hat(coeffs, pts, chunk=chunk, derivative=derivative,
                                    real=np.isrealobj(values))

    def interpolate_hat(self, coeffs, points, chunk=512, derivative=None, real=False):
        n, d = self.points_per_axis, self.dim
        batch = coeffs.shape[:-d]
        c = coeffs.reshape((-1,) + self.shape)
        nb = c.shape[0]
        out = np.empty((nb, len(points)), dtype=complex)
        for lo in range(0, len(points), chunk):
            p = points[lo:lo + chunk]
            mats = [self._phase_matrix(p[:, j], derivative == j) for j in range(d)]
            # contract the last axis first, then peel off the remaining ones
            t = c.reshape(nb, -1, n) @ mats[-1].T  # (nb, n^(d-1), P)
            for j in range(d - 2, -1, -1):
                t = t.reshape(nb, -1, n, len(p))
                t = np.einsum("bamp,pm->bap", t, mats[j])
            out[:, lo:lo + chunk] = t.reshape(nb, len(p))
        out = out.reshape(batch + (len(points),))
        return out.real if real else out

    def interpolate_tensor(self, values: np.ndarray, axes: Sequence[np.ndarray],
                           derivative: int | None = None) -> np.ndarray:
        """Trigonometric interpolant on a tensor product of 1-D node sets.

        With ``derivative=j`` the partial derivative along axis ``j`` is
        evaluated instead.
        """
        c = self.fft(values)
        for j, xs in enumerate(axes):
            m = self._phase_matrix(np.asarray(xs, float), derivative == j)
            c = np.moveaxis(np.tensordot(c, m, axes=([j], [1])), -1, j)
        return c.real if np.isrealobj(values) else c


# ============================================================================
# field containers
# ============================================================================
@dataclass
class ScalarField:
    """Grid function in physical or spectral representation."""

    grid: PeriodicGrid
    values: np.ndarray
    representation: str = PHYSICAL

    def __post_init__(self):
        if self.representation not in _REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        self.values = np.asarray(self.values)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")

    @property
    def is_real(self) -> bool:
        """True when the physical values are real to ``1e-12`` of the sup norm."""
        v = self.physical()
        if np.isrealobj(v):
            return True
        scale = np.max(np.abs(v))
        return bool(np.max(np.abs(v.imag)) <= 1e-12 * scale) if scale > 0 else True

    def physical(self) -> np.ndarray:
        if self.representation == PHYSICAL:
            return self.values
        return self.grid.ifft(self.values)


@dataclass
class VectorField:
    """``dim`` stacked scalar components, shape ``(dim, *grid.shape)``."""

    grid: PeriodicGrid
    values: np.ndarray
    representation: str = PHYSICAL

    def __post_init__(self):
        if self.representation not in _REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        self.values = np.asarray(self.values)
        if self.values.shape != (self.grid.dim,) + self.grid.shape:
            raise ValueError("vector field must have shape (dim, *grid.shape)")

    def component(self, j: int) -> ScalarField:
        return ScalarField(self.grid, self.values[j], self.representation)

    def physical(self) -> np.ndarray:
        if self.representation == PHYSICAL:
            return self.values
        return self.grid.ifft(self.values)


def make_grid(dim: int, points_per_axis: int, half_length: float) -> PeriodicGrid:
    """Build a :class:`PeriodicGrid`, validating its parameters."""
    return PeriodicGrid(int(dim), int(points_per_axis), float(half_length))


def to_spectral(f: ScalarField) -> ScalarField:
    if f.representation == SPECTRAL:
        return f
    return ScalarField(f.grid, f.grid.fft(f.values), SPECTRAL)


def to_physical(f: ScalarField) -> ScalarField:
    if f.representation == PHYSICAL:
        return f
    return ScalarField(f.grid, f.grid.ifft(f.values), PHYSICAL)


def gradient(f: ScalarField) -> VectorField:
    """Spectral gradient; returned in the representation of the input."""
    g = f.grid
    if f.representation == SPECTRAL:
        return VectorField(g, g.gradient_hat(f.values), SPECTRAL)
    return VectorField(g, g.gradient(f.values), PHYSICAL)


def sobolev_norm(f: ScalarField, order: float, homogeneous: bool = False) -> float:
    """Bessel (default) or Riesz potential norm of order ``order``."""
    w = f.grid.sobolev_weight(order, homogeneous)
    c = to_spectral(f).values
    return float(np.sqrt(f.grid.volume * np.sum((w * np.abs(c)) ** 2)))


def l2_norm(f: ScalarField | VectorField) -> float:
    v = f.physical()
    return f.grid.l2_norm(v)


def sup_norm(f: ScalarField | VectorField) -> float:
    v = f.physical()
    if isinstance(f, VectorField):
        return float(np.max(np.sqrt(np.sum(np.abs(v) ** 2, axis=0))))
    return float(np.max(np.abs(v)))


# ============================================================================
# serialisation
# ============================================================================
_MAGIC = b"CLFD"
_HEADER = struct.Struct("<4sIIIdBI")  # magic, version, dim, N, L, tag, ncomp


def save_field(f: ScalarField | VectorField, path) -> None:
    """Write a field to the flat binary container.

    The header holds dimension, points per axis, half length and the
    representation tag; the payload is interleaved real/imaginary doubles
    in row-major order, component after component.
    """
    g = f.grid
    vals = np.asarray(f.values, dtype=np.complex128)
    ncomp = 1 if isinstance(f, ScalarField) else g.dim
    tag = _REPRESENTATIONS.index(f.representation)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, g.dim, g.points_per_axis, g.half_length, tag, ncomp))
        fh.write(np.ascontiguousarray(vals).view(np.float64).tobytes())


def load_field(path) -> ScalarField | VectorField:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, _version, dim, n, half, tag, ncomp = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a field container")
        raw = np.frombuffer(fh.read(), dtype=np.float64)
    g = make_grid(dim, n, half)
    vals = raw.view(np.complex128).copy()
    rep = _REPRESENTATIONS[tag]
    if ncomp == 1:
        return ScalarField(g, vals.reshape(g.shape), rep)
    return VectorField(g, vals.reshape((ncomp,) + g.shape), rep)


def field_to_json(f: ScalarField | VectorField) -> str:
    """JSON text for small grids (nested lists of real and imaginary parts)."""
    g = f.grid
    v = np.asarray(f.values, dtype=complex)
    doc = {
        "dim": g.dim,
        "points_per_axis": g.points_per_axis,
        "half_length": g.half_length,
        "representation": f.representation,
        "kind": "scalar" if isinstance(f, ScalarField) else "vector",
        "re": v.real.tolist(),
        "im": v.imag.tolist(),
    }
    return json.dumps(doc)


def field_from_json(text: str) -> ScalarField | VectorField:
    doc = json.loads(text)
    g = make_grid(doc["dim"], doc["points_per_axis"], doc["half_length"])
    v = np.asarray(doc["re"], float) + 1j * np.asarray(doc["im"], float)
    cls = ScalarField if doc["kind"] == "scalar" else VectorField
    return cls(g, v, doc["representation"])
