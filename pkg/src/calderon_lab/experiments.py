"""Uniqueness identities and the experiment runner.

The first half holds the computations of the uniqueness argument: the limit
product identity and its Fourier form, the distribution ``q``, the sampling
of its Fourier transform on a cone of frequencies, and a finite-``s``
diagnostic of the CGO product integral.  The second half validates a
configuration and dispatches the experiment stages, writing every table and
a manifest through one serialising sink.
"""
from __future__ import annotations

import copy
import hashlib
import json
import platform
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bourgain import (generic_k, localization_check, make_zeta_pair, radial_cutoff,
                       sample_directions)
from .carleman import (AnalyticSampler, QuadDomain, absorption_margin, boundary_report,
                       interior_ratio, trace_check)
from .cgo import CgoSolverError, cgo_equation_residual, decay_sweep, solve_w
from .conductivity import (Conductivity, bump, check_pairing, constant, face_matched, log_data,
                           synth_cone, synth_smooth)
from .dn import FdDomain, FvOperator, boundary_decay_sweep, identity_residual, solve_dirichlet
from .grid import PeriodicGrid, ScalarField, make_grid, set_workers
from .mollifier import default_kernel, kernel_hat, make_pair, rate_sweep, sup_bounds
from .rates import FAIL, FLAG, PASS, RateTable

__all__ = [
    "product_identity",
    "q_distribution",
    "fourier_integral",
    "q_hat_lattice",
    "cone_vanishing_check",
    "elliptic_step",
    "UniquenessReport",
    "uniqueness_report",
    "finite_s_diagnostic",
    "ConfigError",
    "validate_config",
    "run_experiment",
    "STAGES",
]


# --------------------------------------------------------------------------
# uniqueness identities
# --------------------------------------------------------------------------
def _plane_wave(grid: PeriodicGrid, k) -> np.ndarray:
    k = np.asarray(k, float)
    return np.exp(1j * sum(kj * x for kj, x in zip(k, grid.coords)))


def fourier_integral(f: np.ndarray, k, grid: PeriodicGrid) -> complex:
    """``int f(x) exp(i x.k) dx`` by the grid rule, for any real ``k``."""
    return complex(np.sum(f * _plane_wave(grid, k)) * grid.cell_volume)


def product_identity(g1: Conductivity, g2: Conductivity, k) -> dict:
    """Both forms of the limit product integral at frequency ``k``.

    ``lhs = int (a grad b - b grad a) . grad((ab)^-1 exp(i x.k))`` with
    ``a = gamma1^1/2``, ``b = gamma2^1/2``, every gradient spectral;
    ``rhs = int exp(i x.k) (-(i k/2).grad(phi1 - phi2) + (|A1|^2 - |A2|^2)/4)``.
    The two agree pointwise in the continuum, so the gap measures spectral
    truncation of the chain rule.
    """
    g = g1.grid
    k = np.asarray(k, float)
    a, b = np.sqrt(g1.gamma), np.sqrt(g2.gamma)
    ga, gb = g.gradient(a), g.gradient(b)
    v = a * gb - b * ga
    psi = 1.0 / (a * b)
    gpsi = g.gradient(psi)
    wave = _plane_wave(g, k)
    lhs = sum(np.sum(v[j] * (gpsi[j] + 1j * k[j] * psi) * wave) for j in range(g.dim))
    lhs = complex(lhs * g.cell_volume)
    l1, l2 = log_data(g1), log_data(g2)
    dgrad = l1.a_field - l2.a_field
    integrand = (-0.5j * np.tensordot(k, dgrad, axes=(0, 0))
                 + 0.25 * (np.sum(l1.a_field**2, axis=0) - np.sum(l2.a_field**2, axis=0)))
    rhs = fourier_integral(integrand, k, g)
    gap = abs(lhs - rhs)
    return dict(lhs=lhs, rhs=rhs, gap=float(gap), scale=float(max(abs(lhs), 1.0)))


def q_distribution(g1: Conductivity, g2: Conductivity) -> ScalarField:
    """``q = Lap(phi1 - phi2)/2 + (|A1|^2 - |A2|^2)/4`` assembled spectrally."""
    g = g1.grid
    l1, l2 = log_data(g1), log_data(g2)
    q = 0.5 * g.laplacian(l1.phi - l2.phi) + 0.25 * (
        np.sum(l1.a_field**2, axis=0) - np.sum(l2.a_field**2, axis=0))
    return ScalarField(g, np.real(q))


def q_scale(g1: Conductivity, g2: Conductivity) -> float:
    """``L1`` size of the ingredients of ``q``; bounds ``|q_hat|`` at every frequency."""
    g = g1.grid
    total = 0.0
    for c in (g1, g2):
        lg = log_data(c)
        total += np.sum(0.5 * np.abs(g.laplacian(lg.phi)) + 0.25 * np.sum(lg.a_field**2, axis=0))
    return float(total * g.cell_volume)


def q_hat_lattice(q: ScalarField) -> np.ndarray:
    """``q_hat(xi) = int q exp(-i x.xi) dx`` at every lattice frequency (FFT layout)."""
    g = q.grid
    c = g.fft(q.physical()) * g.volume
    # samples start at -L: undo the shift so the transform refers to the origin
    for kx in g.freqs:
        c = c * np.exp(1j * kx * g.half_length)
    return c


def cone_vanishing_check(g1: Conductivity, g2: Conductivity, eta, cone_half_angle: float,
                         n_samples: int = 64, k_max: float | None = None, seed: int = 0,
                         threshold: float = 1e-9) -> dict:
    """Sample ``q_hat`` at lattice frequencies in the cone around ``eta^perp``.

    A frequency ``xi != 0`` belongs to the cone when the angle between ``xi``
    and the plane orthogonal to ``eta`` is below ``cone_half_angle``, that is
    ``|xi.eta| < sin(cone_half_angle) |xi|``.  Candidates are limited to
    ``|xi| <= k_max`` (default a quarter of the Nyquist frequency).
    """
    if not 0 < cone_half_angle <= np.pi / 2:
        raise ValueError("cone_half_angle must lie in (0, pi/2]")
    g = g1.grid
    e = np.asarray(eta, float)
    e = e / np.linalg.norm(e)
    k_max = 0.25 * g.nyquist if k_max is None else k_max
    fx = np.stack(np.broadcast_arrays(*g.freqs), axis=-1).reshape(-1, g.dim)
    nq = np.any(np.abs(fx) >= g.nyquist - 1e-12, axis=1)
    norm = np.linalg.norm(fx, axis=1)
    inside = (norm > 0) & (norm <= k_max) & ~nq
    if cone_half_angle < np.pi / 2:
        inside &= np.abs(fx @ e) < np.sin(cone_half_angle) * norm
    else:
        inside &= np.abs(np.abs(fx @ e) - norm) > 1e-12 * np.maximum(norm, 1.0)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise ValueError("the cone contains no lattice frequencies")
    rng = np.random.default_rng(seed)
    if idx.size > n_samples:
        idx = np.sort(rng.choice(idx, n_samples, replace=False))
    q = q_distribution(g1, g2)
    qh = q_hat_lattice(q).reshape(-1)[idx]
    scale = q_scale(g1, g2)
    mx = float(np.max(np.abs(qh)))
    vanishes = bool(mx <= threshold * scale)
    sup_q = float(np.max(np.abs(q.values)))
    return dict(
        n_samples=int(idx.size), cone_half_angle=float(cone_half_angle), k_max=float(k_max),
        frequencies=fx[idx].tolist(), q_hat_abs=np.abs(qh).tolist(), max_abs_q_hat=mx,
        scale=scale, relative_max=mx / scale if scale > 0 else 0.0,
        q_hat_vanishes=vanishes,
        # a compactly supported q whose transform vanishes on an open set is zero
        q_identically_zero=bool(sup_q <= 1e-10 * max(scale, 1e-300)) if scale > 0 else True,
    )


def elliptic_step(g1: Conductivity, g2: Conductivity, q_zero: bool, atol: float = 1e-10) -> dict:
    """Final step on the constructed pair: ``q = 0`` with equal outer traces forces ``phi1 = phi2``."""
    paired = check_pairing(g1, g2)
    dphi = float(np.max(np.abs(np.log(g1.gamma) - np.log(g2.gamma))))
    return dict(q_zero=bool(q_zero), paired_outside=paired, sup_log_difference=dphi,
                log_difference_zero=bool(dphi <= atol),
                consistent=bool(not (q_zero and paired) or dphi <= atol))


@dataclass
class UniquenessReport:
    k: list
    product_integral: complex
    fourier_side: complex
    gap: float
    scale: float
    q_field: ScalarField = field(repr=False)
    q_hat_on_cone: dict = field(default_factory=dict)
    elliptic: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        cone = dict(self.q_hat_on_cone)
        return dict(
            k=list(map(float, self.k)),
            product_integral=[self.product_integral.real, self.product_integral.imag],
            fourier_side=[self.fourier_side.real, self.fourier_side.imag],
            gap=self.gap, scale=self.scale,
            sup_q=float(np.max(np.abs(self.q_field.values))),
            q_hat_on_cone=cone, elliptic=self.elliptic, verdicts=self.verdicts,
        )


def uniqueness_report(g1: Conductivity, g2: Conductivity, k, eta, cone_half_angle: float = np.pi / 6,
                      n_samples: int = 64, seed: int = 0, gap_tol: float = 1e-8) -> UniquenessReport:
    """Product identity, ``q`` and its cone samples for one pair."""
    pi = product_identity(g1, g2, k)
    cone = cone_vanishing_check(g1, g2, eta, cone_half_angle, n_samples, seed=seed)
    q = q_distribution(g1, g2)
    ell = elliptic_step(g1, g2, cone["q_hat_vanishes"])
    verdicts = dict(product_gap=PASS if pi["gap"] <= gap_tol * pi["scale"] else FAIL,
                    elliptic_consistent=PASS if ell["consistent"] else FAIL)
    return UniquenessReport(list(np.asarray(k, float)), pi["lhs"], pi["rhs"], pi["gap"],
                            pi["scale"], q, cone, ell, verdicts)


def finite_s_diagnostic(g1: Conductivity, g2: Conductivity, kernel, k, s_values, direction=None,
                        tol: float = 1e-8, floor: float = 1e-3) -> RateTable:
    """The CGO product integral at finite ``s`` against its limit.

    With ``u_i = exp(x.zeta_i) exp(-phi_i,s/2)(1 + w_i)`` and
    ``zeta1 + zeta2 = ik`` the integral
    ``I(s) = int (a grad b - b grad a) . grad(u1 u2)`` splits into the
    mollified main term ``M(s)`` (``w_i = 0``) and the remainder ``S(s)``.
    Both distances to the limit are recorded with the remainder bounds
    ``||w_i||`` in the ``Xdot^1/2`` norm.  Verdicts are diagnostic (FLAG).
    """
    g = g1.grid
    kernel = kernel or default_kernel(g.dim)
    k = np.asarray(k, float)
    e1, e2 = direction if direction is not None else sample_directions(k, 1, seed=3)[0]
    l1, l2 = log_data(g1), log_data(g2)
    limit = product_identity(g1, g2, k)["lhs"]
    a, b = np.sqrt(g1.gamma), np.sqrt(g2.gamma)
    v = a * g.gradient(b) - b * g.gradient(a)
    wave = _plane_wave(g, k)

    def pair_integral(prod):
        gp = g.gradient(prod)
        return complex(sum(np.sum(v[j] * (gp[j] + 1j * k[j] * prod) * wave)
                           for j in range(g.dim)) * g.cell_volume)

    table = RateTable(parameter="s")
    table.add_series("gap_total", 0.0, "nonincreasing", 0.0, strict=False)
    table.add_series("gap_main", 0.0, "nonincreasing", 0.0, strict=False)
    table.add_series("remainder", 0.0, "nonincreasing", 0.0, strict=False)
    details = []
    for s in s_values:
        params = make_zeta_pair(k, s, e1, e2)
        try:
            s1 = solve_w(l1, kernel, params, tol=tol, floor=floor, index=1)
            s2 = solve_w(l2, kernel, params, tol=tol, floor=floor, index=2)
        except CgoSolverError as exc:
            table.mark_failed(s, f"{exc.code}: {exc}")
            continue
        p1, p2 = make_pair(l1, s, kernel), make_pair(l2, s, kernel)
        damp = np.exp(-0.5 * (p1.phi_t + p2.phi_t))
        main = pair_integral(damp)
        rem = pair_integral(damp * (s1.w + s2.w + s1.w * s2.w))
        total = main + rem
        table.record("gap_total", s, abs(total - limit))
        table.record("gap_main", s, abs(main - limit))
        table.record("remainder", s, abs(rem))
        details.append(dict(s=float(s), total=[total.real, total.imag], main=[main.real, main.imag],
                            remainder=[rem.real, rem.imag],
                            w1_xdot_half=s1.norm_record["xdot_half"],
                            w2_xdot_half=s2.norm_record["xdot_half"]))
    table.meta.update(limit=[limit.real, limit.imag], samples=details)
    return table


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------
class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


DEFAULT_CONFIG = {
    "grid": {"dim": 3, "points_per_axis": 64, "half_length": float(np.pi)},
    "conductivity": {"family": "smooth", "amplitude": 0.3, "center": [0.0, 0.0, 0.0],
                     "radius": 1.5, "sharpness": 4.0},
    "mollifier": {"n_nodes": 1024, "rho_max": 400.0, "d_rho": 0.02},
    "sweep": {"t_values": [4, 8, 16, 32], "s_values": [8, 16, 32, 64], "k_norm": 2.0,
              "n_directions": 2, "n_fields": 10, "carleman_t": [5, 10, 20, 40],
              "decay_s": [8, 16, 32]},
    "domain": {"center": [0.0, 0.0, 0.0], "half_width": 0.75, "cells": 48,
               "eta": [0.0, 0.0, 1.0], "epsilon": 0.1, "ball_radius": 1.0},
    "tolerances": {"rate": 0.05, "cgo_tol": 1e-8, "max_iter": 50, "floor": 1e-3,
                   "bounded_ratio": 3.0, "localization_ratio": 10.0, "decay_rule": 0.10,
                   "gap": 1e-8, "interior_ratio_min": 0.1},
}

_FAMILIES = ("smooth", "cone", "constant", "face_matched")
_SECTIONS = ("grid", "conductivity", "conductivity2", "mollifier", "sweep", "domain", "tolerances")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _num(cfg, path, positive=False, integer=False):
    sec, key = path.split(".")
    val = cfg.get(sec, {}).get(key)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {val!r}")
    if integer and int(val) != val:
        raise ConfigError(f"{path}: expected an integer, got {val!r}")
    if positive and not val > 0:
        raise ConfigError(f"{path}: must be positive, got {val!r}")
    return val


def _num_list(cfg, path, min_len=1):
    sec, key = path.split(".")
    val = cfg.get(sec, {}).get(key)
    if not isinstance(val, (list, tuple)) or len(val) < min_len:
        raise ConfigError(f"{path}: expected a list of at least {min_len} numbers")
    for v in val:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}: entry {v!r} is not a number")
    return [float(v) for v in val]


def _check_conductivity(entry, name, dim):
    if not isinstance(entry, dict):
        raise ConfigError(f"{name}: expected a mapping")
    fam = entry.get("family")
    if fam not in _FAMILIES:
        raise ConfigError(f"{name}.family: must be one of {', '.join(_FAMILIES)}, got {fam!r}")
    if fam == "constant":
        v = entry.get("value", 1.0)
        if not isinstance(v, (int, float)) or v <= 0:
            raise ConfigError(f"{name}.value: must be a positive number")
        return
    for key in ("amplitude", "radius"):
        v = entry.get(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{name}.{key}: expected a number, got {v!r}")
    if entry["radius"] <= 0:
        raise ConfigError(f"{name}.radius: must be positive")
    if fam in ("smooth", "cone") and not entry["amplitude"] > -1:
        raise ConfigError(f"{name}.amplitude: must exceed -1 for a positive conductivity")
    if fam == "cone" and not entry.get("exponent", 0) > 1:
        raise ConfigError(f"{name}.exponent: must exceed 1 (C^1 profile)")
    key = "face_point" if fam == "face_matched" else "center"
    c = entry.get(key, [0.0] * dim)
    if not isinstance(c, (list, tuple)) or len(c) != dim:
        raise ConfigError(f"{name}.{key}: expected {dim} coordinates")
    if fam == "face_matched":
        nrm = entry.get("normal")
        if not isinstance(nrm, (list, tuple)) or len(nrm) != dim or not np.any(nrm):
            raise ConfigError(f"{name}.normal: expected a non-zero vector of {dim} entries")


def validate_config(config: dict | None) -> dict:
    """Merge ``config`` over the defaults and validate it.

    Raises
    ------
    ConfigError
        With the dotted name of the first offending field.
    """
    config = config or {}
    if not isinstance(config, dict):
        raise ConfigError("config: expected a mapping of sections")
    for sec in config:
        if sec not in _SECTIONS:
            raise ConfigError(f"{sec}: unknown section (allowed: {', '.join(_SECTIONS)})")
    cfg = _merge(DEFAULT_CONFIG, config)
    if "conductivity" in config and "family" in config["conductivity"]:
        # a new family replaces the default parameters rather than merging with them
        cfg["conductivity"] = copy.deepcopy(config["conductivity"])
    dim = _num(cfg, "grid.dim", integer=True)
    if dim not in (2, 3):
        raise ConfigError(f"grid.dim: must be 2 or 3, got {dim}")
    n = _num(cfg, "grid.points_per_axis", positive=True, integer=True)
    if n % 2 or n < 8:
        raise ConfigError(f"grid.points_per_axis: must be even and >= 8, got {n}")
    L = _num(cfg, "grid.half_length", positive=True)
    limit = np.pi * n / L
    _check_conductivity(cfg["conductivity"], "conductivity", dim)
    if "conductivity2" in cfg:
        _check_conductivity(cfg["conductivity2"], "conductivity2", dim)
        if cfg["conductivity2"].get("family") == "face_matched":
            raise ConfigError("conductivity2.family: face_matched is only allowed for conductivity")
    elif cfg["conductivity"]["family"] == "face_matched":
        raise ConfigError("conductivity2: required as the base of a face_matched conductivity")
    for key in ("t_values", "s_values", "carleman_t", "decay_s"):
        vals = _num_list(cfg, f"sweep.{key}")
        if any(v <= 0 for v in vals):
            raise ConfigError(f"sweep.{key}: values must be positive")
        if key in ("t_values", "s_values", "decay_s") and max(vals) > limit:
            raise ConfigError(f"sweep.{key}: value {max(vals):g} exceeds the grid resolution "
                              f"limit pi*N/L = {limit:g}")
    kn = _num(cfg, "sweep.k_norm")
    if kn < 0:
        raise ConfigError("sweep.k_norm: must be non-negative")
    for key in ("s_values", "decay_s"):
        if min(cfg["sweep"][key]) < kn / 2:
            raise ConfigError(f"sweep.{key}: s must be at least |k|/2 = {kn / 2:g}")
    _num(cfg, "sweep.n_directions", positive=True, integer=True)
    _num(cfg, "sweep.n_fields", positive=True, integer=True)
    _num(cfg, "domain.half_width", positive=True)
    cells = _num(cfg, "domain.cells", positive=True, integer=True)
    if cells < 4:
        raise ConfigError("domain.cells: need at least 4 cells per axis")
    eta = cfg["domain"].get("eta")
    if not isinstance(eta, (list, tuple)) or len(eta) != dim or not np.isclose(np.linalg.norm(eta), 1):
        raise ConfigError(f"domain.eta: expected a unit vector with {dim} entries")
    _num(cfg, "domain.epsilon")
    _num(cfg, "domain.ball_radius", positive=True)
    for key in DEFAULT_CONFIG["tolerances"]:
        _num(cfg, f"tolerances.{key}", positive=True)
    _num(cfg, "mollifier.n_nodes", positive=True, integer=True)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def build_conductivity(entry: dict, grid: PeriodicGrid, base: Conductivity | None = None) -> Conductivity:
    fam = entry["family"]
    c = entry.get("center", [0.0] * grid.dim)
    if fam == "smooth":
        return synth_smooth(entry["amplitude"], c, entry["radius"], grid, entry.get("sharpness", 1.0))
    if fam == "cone":
        return synth_cone(entry["amplitude"], entry["exponent"], c, entry["radius"], grid)
    if fam == "constant":
        return constant(entry.get("value", 1.0), grid)
    return face_matched(base, entry["face_point"], entry["normal"], entry["amplitude"], entry["radius"],
                        entry.get("sharpness", 1.0))


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------
@dataclass
class StageResult:
    name: str
    verdicts: dict
    outputs: dict = field(default_factory=dict)  # file name -> text
    seconds: float = 0.0
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and all(v == PASS for v in self.verdicts.values())


def _verdict(ok: bool) -> str:
    return PASS if ok else FAIL


class _Context:
    """Objects shared by the stages of one run, built lazily and once."""

    def __init__(self, cfg: dict, seed: int):
        self.cfg, self.seed = cfg, seed
        g = cfg["grid"]
        self.grid = make_grid(g["dim"], g["points_per_axis"], g["half_length"])
        m = cfg["mollifier"]
        self.kernel = default_kernel(g["dim"], m["n_nodes"], m["rho_max"], m["d_rho"])
        self._lock = threading.Lock()
        self._cond = None
        self._box = None

    def conductivities(self):
        with self._lock:
            if self._cond is None:
                cfg = self.cfg
                g2 = (build_conductivity(cfg["conductivity2"], self.grid)
                      if "conductivity2" in cfg else None)
                g1 = build_conductivity(cfg["conductivity"], self.grid, base=g2)
                self._cond = (g1, g2)
            return self._cond

    def box_pair(self):
        """Boundary-matched pair for the finite-volume stages.

        The configured pair is used when ``conductivity2`` is given.
        Otherwise a default pair scaled to the box is built on a grid of the
        same resolution with ``L = half_width / 0.375``: a smooth base bump of
        radius ``2/3`` of the half-width and a perturbation matched to first
        order on the face the direction ``eta`` points through.
        """
        with self._lock:
            if self._box is None:
                cfg = self.cfg
                if "conductivity2" in cfg:
                    g1, g2 = self._cond or (None, None)
                    if g1 is None:
                        g2 = build_conductivity(cfg["conductivity2"], self.grid)
                        g1 = build_conductivity(cfg["conductivity"], self.grid, base=g2)
                    self._box = (g1, g2)
                else:
                    d = cfg["domain"]
                    a = float(d["half_width"])
                    c = np.asarray(d["center"], float)
                    eta = np.asarray(d["eta"], float)
                    grid = make_grid(self.grid.dim, self.grid.points_per_axis, a / 0.375)
                    g2 = synth_smooth(0.2, c, 2 * a / 3, grid)
                    g1 = face_matched(g2, c + a * eta, eta, 0.5, 0.53 * a)
                    self._box = (g1, g2)
            return self._box

    def k(self):
        return generic_k(self.cfg["sweep"]["k_norm"], seed=self.seed) if self.grid.dim == 3 \
            else np.zeros(2)


def stage_rates(ctx: _Context) -> StageResult:
    g1, _ = ctx.conductivities()
    t_values = ctx.cfg["sweep"]["t_values"]
    tol = ctx.cfg["tolerances"]
    strict = g1.regularity_class != "cone_profile"
    table = rate_sweep(log_data(g1), ctx.kernel, t_values, tol=tol["rate"], strict=strict)
    bounds = sup_bounds(log_data(g1), ctx.kernel, t_values)
    dim = ctx.grid.dim
    h = 1e-4
    grad0 = [(kernel_hat(h * e, ctx.kernel)[()] - kernel_hat(-h * e, ctx.kernel)[()]) / (2 * h)
             for e in np.eye(dim)]
    kern = dict(psi_hat_0=float(kernel_hat(np.zeros(dim), ctx.kernel)),
                grad_psi_hat_0=float(np.linalg.norm(grad0)))
    verdicts = dict(table.verdicts)
    verdicts["sup_bounds"] = _verdict(all(b["ok"] for b in bounds))
    verdicts["kernel"] = _verdict(abs(kern["psi_hat_0"] - 1) <= 1e-8 and kern["grad_psi_hat_0"] <= 1e-8)
    payload = dict(table=table.to_dict(), sup_bounds=bounds, kernel=kern, verdicts=verdicts)
    return StageResult("rates", verdicts, {"rates.csv": table.to_csv(),
                                           "rates.json": json.dumps(payload, indent=2)})


def stage_cgo(ctx: _Context) -> StageResult:
    g1, _ = ctx.conductivities()
    cfg, tol = ctx.cfg, ctx.cfg["tolerances"]
    lg = log_data(g1)
    k = ctx.k()
    dirs = sample_directions(k, cfg["sweep"]["n_directions"], seed=ctx.seed)
    s_values = cfg["sweep"]["s_values"]
    table = decay_sweep(lg, ctx.kernel, k, s_values, dirs, tol["cgo_tol"], tol["max_iter"],
                        tol["floor"])
    for name in ("l2_on_domain", "h1_on_domain", "h2_on_domain"):
        table.series[name].tol = tol["bounded_ratio"]
    residuals = []
    for s in s_values:
        params = make_zeta_pair(k, s, *dirs[0])
        try:
            sol = solve_w(lg, ctx.kernel, params, tol["cgo_tol"], tol["max_iter"], tol["floor"])
        except CgoSolverError as exc:
            residuals.append(dict(s=s, error=str(exc)))
            continue
        r = cgo_equation_residual(lg, ctx.kernel, sol)
        residuals.append(dict(s=s, max_ratio=max(sol.contraction_ratios, default=0.0),
                              equation_residual=sol.equation_residual, rhs_norm=sol.rhs_norm, **r))
    verdicts = dict(table.verdicts)
    conv = [r for r in residuals if "error" not in r]
    verdicts["converged"] = _verdict(len(conv) == len(s_values) and not table.partial)
    verdicts["geometric_decay"] = _verdict(bool(conv) and all(r["max_ratio"] < 0.9 for r in conv))
    verdicts["cgo_residual"] = _verdict(bool(conv) and all(r["relative"] <= 1e-5 for r in conv))
    payload = dict(table=table.to_dict(), residuals=residuals, verdicts=verdicts)
    return StageResult("cgo", verdicts, {"cgo.csv": table.to_csv(),
                                         "cgo.json": json.dumps(payload, indent=2, default=float)})


def random_band_limited(grid: PeriodicGrid, band: int, rng) -> np.ndarray:
    """Real random field whose Fourier modes satisfy ``|m_j| <= band``."""
    c = np.zeros(grid.shape, complex)
    m = np.abs(grid.wavenumbers) * grid.half_length / np.pi <= band
    mask = m
    for _ in range(grid.dim - 1):
        mask = mask[..., None] & m[(None,) * mask.ndim]
    c[mask] = rng.normal(size=mask.sum()) + 1j * rng.normal(size=mask.sum())
    return grid.ifft(c).real


def stage_localize(ctx: _Context) -> StageResult:
    cfg = ctx.cfg
    g = ctx.grid
    g1, _ = ctx.conductivities()
    rng = np.random.default_rng(ctx.seed)
    k = ctx.k()
    dirs = sample_directions(k, cfg["sweep"]["n_fields"], seed=ctx.seed + 1)
    inner = max(g1.support_radius, 0.25 * g.half_length) + 2 * g.spacing
    cut = radial_cutoff(g, inner, 0.8 * g.half_length, g1.center)
    bound = cfg["tolerances"]["localization_ratio"]
    records, worst = [], {}
    for i in range(cfg["sweep"]["n_fields"]):
        u = random_band_limited(g, 4, rng)
        vals = {}
        for s in cfg["sweep"]["s_values"]:
            rep = localization_check(u, cut, make_zeta_pair(k, s, *dirs[i]).zeta1,
                                     cfg["tolerances"]["floor"], g)
            for r in rep.records():
                records.append(dict(field=i, **r))
                vals.setdefault(r["ratio_name"], []).append(r["value"])
        for n, v in vals.items():
            worst[n] = max(worst.get(n, 0.0), max(v) / min(v))
    verdicts = {f"ratio_{n}": _verdict(v <= bound) for n, v in worst.items()}
    payload = dict(records=records, max_over_min=worst, bound=bound, verdicts=verdicts)
    return StageResult("localize", verdicts, {"localize.json": json.dumps(payload, indent=2)})


def stage_carleman(ctx: _Context) -> StageResult:
    cfg = ctx.cfg
    g = ctx.grid
    g1, _ = ctx.conductivities()
    lg = log_data(g1)
    eta = np.asarray(cfg["domain"]["eta"], float)
    rb = cfg["domain"]["ball_radius"]
    verdicts, out = {}, {}
    if g.dim == 3:
        # interior bump well inside a ball that itself fits in the torus
        dom = QuadDomain.ball(np.zeros(3), 0.6 * g.half_length)
        u = bump(g.radius() ** 2 / (0.4 * g.half_length) ** 2)
        ratios = {"free": [], "perturbed": []}
        for t in cfg["sweep"]["carleman_t"]:
            pair = make_pair(lg, t, ctx.kernel)
            ratios["free"].append(interior_ratio(u, t, eta, "free", domain=dom, grid=g))
            ratios["perturbed"].append(interior_ratio(u, t, eta, "perturbed", lg, pair, dom, g))
            out.setdefault("absorption", []).append(dict(t=t, **absorption_margin(lg, pair)))
        lo = cfg["tolerances"]["interior_ratio_min"]
        for mode, r in ratios.items():
            verdicts[f"interior_{mode}"] = _verdict(min(r) >= lo and r[-1] >= r[-2] * (1 - 1e-12))
        out["interior_ratio"] = ratios
        ball = QuadDomain.ball(np.zeros(3), rb)
        lin = AnalyticSampler.linear(eta)
        reports, err = [], 0.0
        for t in (1.0, 2.0, 4.0):
            rep = boundary_report(lin, t, eta, ball)
            vol = 4 * np.pi * rb**3 / 3
            exact = dict(vol_t2_u2=t * t * vol * rb**2 / 5, vol_grad2=vol,
                         bnd_t2_u2=t * t * 4 * np.pi * rb**4 / 3, bnd_u_dnu_re=4 * np.pi * rb**3 / 3,
                         bnd_u_dnu_im=0.0, bnd_4t_re=0.0, bnd_2t_grad=0.0, bnd_2t3_u2=0.0)
            got = {**rep.volume_terms, **rep.boundary_terms}
            sc = max(abs(v) for v in exact.values())
            err = max(err, max(abs(got[n] - v) for n, v in exact.items()) / sc)
            reports.append(json.loads(rep.to_json()))
        verdicts["closed_forms"] = _verdict(err <= 1e-6)
        tc1 = trace_check(AnalyticSampler.constant(), QuadDomain.ball(np.zeros(3), 1.0))
        verdicts["trace_constant"] = _verdict(abs(tc1["fitted_C"] - 3.0) <= 1e-10)
        out.update(boundary_reports=reports, closed_form_error=err, trace_unit_ball=tc1)
    else:
        verdicts["carleman_dim"] = FLAG
    payload = dict(out, verdicts=verdicts)
    return StageResult("carleman", verdicts, {"carleman.json": json.dumps(payload, indent=2, default=float)})


def _dn_domain(cfg, cells=None):
    d = cfg["domain"]
    return FdDomain(tuple(d["center"]), d["half_width"], cells or d["cells"], tuple(d["eta"]),
                    d["epsilon"])


def stage_dn(ctx: _Context) -> StageResult:
    cfg = ctx.cfg
    g1, g2 = ctx.box_pair()
    dom = _dn_domain(cfg)
    rng = np.random.default_rng(ctx.seed)
    pts = dom.face_points
    f = np.cos(pts[:, 0] + 0.5 * pts[:, 1]) + pts[:, 2] ** 2
    h = np.sin(pts[:, 1] - pts[:, 2]) + pts[:, 0]
    op = FvOperator(g1, dom)
    rf, rh = solve_dirichlet(g1, dom, f, operator=op), solve_dirichlet(g1, dom, h, operator=op)
    a = dom.face_area
    sym = abs(np.sum(rf.flux * h) * a - np.sum(rh.flux * f) * a) / max(
        np.sum(np.abs(rf.flux * h)) * a, 1e-300)
    cons = max(rf.conservation_defect, rh.conservation_defect)
    # maximum principle on a coarse box with a direct factorisation
    small = _dn_domain(cfg, 12)
    sop = FvOperator(g1, small)
    mp_violation = 0.0
    for _ in range(100):
        ff = rng.uniform(-1, 1, small.n_faces)
        u = sop.solve(ff, direct=True)
        mp_violation = max(mp_violation, float(np.max(u) - ff.max()), float(ff.min() - np.min(u)))
    null = identity_residual(g1, g1, dom, f, h)
    levels = []
    for n in (dom.cells // 4, dom.cells // 2, dom.cells):
        r = identity_residual(g1, g2, _dn_domain(cfg, n), lambda p: p[:, 0] + p[:, 2] ** 2,
                            lambda p: np.exp(p[:, 1]))
        levels.append(r)
    orders = [float(np.log2(levels[i]["residual"] / levels[i + 1]["residual"]))
              for i in range(len(levels) - 1) if levels[i + 1]["residual"] > 0]
    verdicts = dict(
        symmetry=_verdict(sym <= 1e-6),
        conservation=_verdict(cons <= 1e-8),
        maximum_principle=_verdict(mp_violation <= 0.0),
        identity_null=_verdict(abs(null["lhs"]) <= 1e-10 and abs(null["rhs"]) <= 1e-10),
        identity_order=_verdict(bool(orders) and min(orders) >= 1.0),
    )
    payload = dict(symmetry_defect=sym, conservation_defect=cons,
                   max_principle_violation=mp_violation, identity_null=null,
                   identity_levels=levels, observed_orders=orders, verdicts=verdicts)
    return StageResult("dn", verdicts, {"dn.json": json.dumps(payload, indent=2, default=float),
                                        "dn_boundary.csv": rf.to_csv()})


def stage_decay(ctx: _Context) -> StageResult:
    cfg = ctx.cfg
    g1, g2 = ctx.box_pair()
    dom = _dn_domain(cfg)
    k = np.asarray(ctx.k(), float)
    eta = np.asarray(dom.eta, float)
    k = k - (k @ eta) * eta
    k = cfg["sweep"]["k_norm"] * k / max(np.linalg.norm(k), 1e-300) if np.any(k) else k
    tol = cfg["tolerances"]
    table = boundary_decay_sweep(g1, g2, ctx.kernel, k, cfg["sweep"]["decay_s"], dom,
                                 tol=tol["cgo_tol"], floor=tol["floor"], rule_tol=tol["decay_rule"])
    control = boundary_decay_sweep(g2, g2, ctx.kernel, k, cfg["sweep"]["decay_s"], dom,
                                   tol=tol["cgo_tol"], floor=tol["floor"])
    verdicts = dict(table.verdicts)
    verdicts["control_zero"] = _verdict(all(v == 0.0 for _, _, v, _ in control.rows())
                                        and not control.partial)
    payload = dict(table=table.to_dict(), control=control.to_dict(), verdicts=verdicts)
    return StageResult("decay", verdicts, {"decay.csv": table.to_csv(),
                                           "decay.json": json.dumps(payload, indent=2, default=float)})


def stage_unique(ctx: _Context) -> StageResult:
    cfg = ctx.cfg
    g1, g2 = ctx.conductivities()
    g2 = g2 if g2 is not None else constant(1.0, ctx.grid)
    eta = cfg["domain"]["eta"]
    k = ctx.k()
    rep = uniqueness_report(g1, g2, k, eta, seed=ctx.seed, gap_tol=cfg["tolerances"]["gap"])
    null = uniqueness_report(g1, g1, k, eta, seed=ctx.seed, gap_tol=cfg["tolerances"]["gap"])
    nd = null.to_dict()
    zero = (abs(null.product_integral) == 0 and abs(null.fourier_side) == 0
            and nd["sup_q"] == 0 and nd["q_hat_on_cone"]["max_abs_q_hat"] == 0)
    verdicts = dict(rep.verdicts)
    verdicts["null_pipeline_zero"] = _verdict(zero)
    verdicts["null_cone_vanishes"] = _verdict(null.q_hat_on_cone["q_hat_vanishes"])
    payload = dict(report=rep.to_dict(), null=nd, verdicts=verdicts)
    return StageResult("unique", verdicts, {"unique.json": json.dumps(payload, indent=2, default=float)})


STAGES = {
    "rates": stage_rates,
    "cgo": stage_cgo,
    "localize": stage_localize,
    "carleman": stage_carleman,
    "dn": stage_dn,
    "decay": stage_decay,
    "unique": stage_unique,
}


class _Sink:
    """Serialises every file write of a run."""

    def __init__(self, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.files: list[str] = []

    def write(self, name: str, text: str) -> None:
        with self._lock:
            (self.out / name).write_text(text)
            self.files.append(name)


def _run_stage(name, ctx, sink) -> StageResult:
    start = time.perf_counter()
    try:
        res = STAGES[name](ctx)
    except ConfigError:
        raise
    except Exception as exc:  # reported in the manifest, never swallowed silently
        res = StageResult(name, {}, error=f"{type(exc).__name__}: {exc}")
    res.seconds = time.perf_counter() - start
    for fname, text in res.outputs.items():
        sink.write(fname, text)
    return res


def run_experiment(config: dict | None, out_dir, stages=None, seed: int = 0,
                   threads: int = 1) -> dict:
    """Validate ``config``, run the requested stages and write the report bundle.

    Returns the manifest, which is also written to ``manifest.json``.  Stages
    run concurrently when ``threads > 1``; FFT workers are then shared out
    between them.
    """
    cfg = validate_config(config)
    names = list(STAGES) if stages in (None, "all") else [stages] if isinstance(stages, str) else list(stages)
    for n in names:
        if n not in STAGES:
            raise ConfigError(f"stage: unknown experiment {n!r}")
    set_workers(max(1, threads // max(1, min(threads, len(names)))))
    ctx = _Context(cfg, seed)
    sink = _Sink(Path(out_dir))
    start = time.perf_counter()
    if threads > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(names))) as pool:
            results = list(pool.map(lambda n: _run_stage(n, ctx, sink), names))
    else:
        results = [_run_stage(n, ctx, sink) for n in names]
    manifest = dict(
        config=cfg, config_hash=config_hash(cfg), seed=seed, threads=threads,
        versions=dict(artifact=__version__, python=platform.python_version(),
                      numpy=np.__version__, scipy=scipy.__version__),
        timings={r.name: r.seconds for r in results},
        total_seconds=time.perf_counter() - start,
        stages={r.name: dict(verdicts=r.verdicts, passed=r.passed, error=r.error) for r in results},
        files=sorted(sink.files),
        passed=all(r.passed for r in results),
    )
    sink.write("manifest.json", json.dumps(manifest, indent=2, default=float))
    return manifest
