"""Tests for the uniqueness computations and the experiment runner.

Validates:
- q equals the difference of gamma^-1/2 Lap gamma^1/2 for the two conductivities
- conjugate symmetry of the lattice transform of a real q
- the two forms of the product identity, and q_hat(-k) against the Fourier side
- cone sampling, the elliptic step and the finite-s diagnostic layout
- configuration validation with field-level messages, hashing and the manifest
"""
import json

import numpy as np
import pytest

from calderon_lab.bourgain import generic_k
from calderon_lab.conductivity import constant, from_log, synth_smooth
from calderon_lab.experiments import (DEFAULT_CONFIG, ConfigError, config_hash,
                                      cone_vanishing_check, elliptic_step, finite_s_diagnostic,
                                      product_identity, q_distribution, q_hat_lattice,
                                      run_experiment, uniqueness_report, validate_config)
from calderon_lab.grid import make_grid


@pytest.fixture(scope="module")
def pair32(grid32):
    g1 = synth_smooth(0.3, None, 1.5, grid32, sharpness=4.0)
    g2 = synth_smooth(-0.2, (0.3, 0.0, 0.0), 1.2, grid32, sharpness=4.0)
    return g1, g2


def _grid_lap_sqrt_ratio(g, gamma):
    root = np.sqrt(gamma)
    return g.laplacian(root) / root


class TestQ:
    def test_q_is_schroedinger_potential_difference(self):
        """For band-limited logs: q = a^-1 Lap a - b^-1 Lap b with a, b = gamma^1/2."""
        g = make_grid(3, 32, np.pi)
        x, y, z = g.coords
        p1 = np.broadcast_to(0.1 * np.cos(x) * np.sin(y), g.shape)
        p2 = np.broadcast_to(0.05 * np.sin(z), g.shape)
        c1, c2 = from_log(p1, g, np.pi), from_log(p2, g, np.pi)
        q = q_distribution(c1, c2).values
        ref = _grid_lap_sqrt_ratio(g, c1.gamma) - _grid_lap_sqrt_ratio(g, c2.gamma)
        assert np.max(np.abs(q - ref)) < 1e-10

    def test_conjugate_symmetry(self, pair32):
        """q real implies q_hat(-k) = conj(q_hat(k)) exactly on the lattice."""
        qh = q_hat_lattice(q_distribution(*pair32))
        n = qh.shape[0]
        neg = (-np.arange(n)) % n
        flipped = qh[np.ix_(neg, neg, neg)]
        assert np.max(np.abs(flipped - np.conj(qh))) <= 1e-15 * np.max(np.abs(qh))

    def test_zero_for_equal_pair(self, pair32):
        assert not np.any(q_distribution(pair32[0], pair32[0]).values)


class TestProductIdentity:
    def test_forms_agree(self, pair32):
        k = generic_k(2.0)
        r = product_identity(*pair32, k)
        assert r["gap"] <= 1e-6 * r["scale"]

    def test_fourier_side_is_q_hat(self, pair32, grid32):
        """rhs at a lattice frequency k equals q_hat(-k) (the transform uses exp(-i x.xi))."""
        m = np.array([1, 2, 0])
        k = m * np.pi / grid32.half_length
        rhs = product_identity(*pair32, k)["rhs"]
        qh = q_hat_lattice(q_distribution(*pair32))
        assert qh[tuple((-m) % 32)] == pytest.approx(rhs, abs=1e-13)

    def test_equal_pair_exact_zero(self, pair32):
        r = product_identity(pair32[0], pair32[0], [1.0, 0.0, 0.0])
        assert r["lhs"] == 0 and r["rhs"] == 0


class TestCone:
    def test_distinct_pair_nonvanishing(self, pair32):
        out = cone_vanishing_check(*pair32, [0, 0, 1.0], np.pi / 6, n_samples=32)
        assert out["n_samples"] == 32
        assert out["relative_max"] > 1e-3
        assert not out["q_hat_vanishes"] and not out["q_identically_zero"]

    def test_equal_pair_vanishes(self, pair32):
        out = cone_vanishing_check(pair32[0], pair32[0], [0, 0, 1.0], np.pi / 6)
        assert out["max_abs_q_hat"] == 0.0 and out["q_hat_vanishes"] and out["q_identically_zero"]

    def test_frequencies_in_cone(self, pair32):
        out = cone_vanishing_check(*pair32, [0, 0, 1.0], np.pi / 8)
        f = np.asarray(out["frequencies"])
        assert np.all(np.abs(f[:, 2]) < np.sin(np.pi / 8) * np.linalg.norm(f, axis=1))

    def test_invalid(self, pair32):
        with pytest.raises(ValueError, match="cone_half_angle"):
            cone_vanishing_check(*pair32, [0, 0, 1.0], 0.0)
        with pytest.raises(ValueError, match="no lattice"):
            cone_vanishing_check(*pair32, [0, 0, 1.0], np.pi / 6, k_max=0.5)


class TestReport:
    def test_elliptic_step(self, pair32):
        e = elliptic_step(pair32[0], pair32[0], True)
        assert e["log_difference_zero"] and e["consistent"]
        e2 = elliptic_step(*pair32, False)
        assert not e2["log_difference_zero"] and e2["consistent"]

    def test_uniqueness_report(self, pair32):
        rep = uniqueness_report(*pair32, generic_k(2.0), [0, 0, 1.0], gap_tol=1e-6)
        d = rep.to_dict()
        assert d["verdicts"]["product_gap"] == "PASS"
        assert json.dumps(d, default=float)

    def test_finite_s_layout(self, pair32, kernel3):
        tab = finite_s_diagnostic(*pair32, kernel3, generic_k(2.0), [8, 16])
        assert set(tab.series) == {"gap_total", "gap_main", "remainder"}
        assert all(v in ("PASS", "FLAG") for v in tab.verdicts.values())
        assert len(tab.meta["samples"]) == 2


class TestConfig:
    def test_defaults(self):
        cfg = validate_config(None)
        assert cfg["grid"]["points_per_axis"] == 64
        assert cfg == validate_config({})
        assert config_hash(cfg) == config_hash(validate_config({}))

    @pytest.mark.parametrize("over, match", [
        ({"grid": {"dim": 4}}, "grid.dim"),
        ({"grid": {"points_per_axis": 33}}, "grid.points_per_axis"),
        ({"sweep": {"s_values": [8, 16, 32, 100]}}, r"sweep.s_values: value 100 exceeds the grid resolution limit pi\*N/L = 64"),
        ({"sweep": {"t_values": "fast"}}, "sweep.t_values"),
        ({"conductivity": {"family": "wavy"}}, "conductivity.family"),
        ({"conductivity": {"family": "smooth", "amplitude": -2.0, "radius": 1.0}}, "conductivity.amplitude"),
        ({"conductivity": {"family": "cone", "amplitude": 0.3, "radius": 1.0, "exponent": 0.5}}, "conductivity.exponent"),
        ({"conductivity": {"family": "face_matched", "amplitude": 0.3, "radius": 0.4,
                           "face_point": [0, 0, 0.75], "normal": [0, 0, 1]}}, "conductivity2"),
        ({"domain": {"eta": [1.0, 1.0, 0.0]}}, "domain.eta"),
        ({"domain": {"cells": 2}}, "domain.cells"),
        ({"tolerances": {"rate": -1}}, "tolerances.rate"),
        ({"bogus": {}}, "bogus: unknown section"),
    ])
    def test_errors_name_the_field(self, over, match):
        with pytest.raises(ConfigError, match=match):
            validate_config(over)

    def test_new_family_replaces_defaults(self):
        cfg = validate_config({"conductivity": {"family": "constant", "value": 2.0}})
        assert cfg["conductivity"] == {"family": "constant", "value": 2.0}

    def test_hash_changes(self):
        a = validate_config({})
        b = validate_config({"sweep": {"k_norm": 1.0}})
        assert config_hash(a) != config_hash(b)


class TestRunner:
    MINIMAL = {"conductivity": {"family": "constant", "value": 1.0}}

    def test_minimal_rates_run(self, tmp_path):
        """gamma = 1: every table is zero and the manifest passes."""
        man = run_experiment(self.MINIMAL, tmp_path, stages="rates")
        assert man["passed"]
        assert set(man["stages"]) == {"rates"}
        on_disk = json.loads((tmp_path / "manifest.json").read_text())
        assert on_disk["config_hash"] == man["config_hash"]
        tab = json.loads((tmp_path / "rates.json").read_text())
        assert all(v == 0 for s in tab["table"]["series"] for v in s["value"])
        assert (tmp_path / "rates.csv").exists()

    def test_unknown_stage(self, tmp_path):
        with pytest.raises(ConfigError, match="stage"):
            run_experiment(self.MINIMAL, tmp_path, stages="nope")

    def test_unique_stage_emits_report(self, tmp_path):
        cfg = {"grid": {"points_per_axis": 32},
               "conductivity": {"family": "smooth", "amplitude": 0.3, "radius": 1.5, "sharpness": 4.0},
               "conductivity2": {"family": "smooth", "amplitude": -0.2, "center": [0.3, 0.0, 0.0],
                                 "radius": 1.2, "sharpness": 4.0},
               "sweep": {"s_values": [8, 16, 24, 32], "t_values": [4, 8, 16, 32], "decay_s": [8, 16, 32]},
               "tolerances": {"gap": 1e-6}}
        man = run_experiment(cfg, tmp_path, stages=["unique"], threads=2)
        rep = json.loads((tmp_path / "unique.json").read_text())
        assert {"report", "null", "verdicts"} <= set(rep)
        assert rep["null"]["sup_q"] == 0.0
        assert man["stages"]["unique"]["verdicts"]["null_pipeline_zero"] == "PASS"
