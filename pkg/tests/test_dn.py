"""Tests for the finite-volume Dirichlet solver, the DN map and the boundary sweeps.

Validates:
- exactness on linear data for constant conductivity, constants map to zero flux
- conductivity scaling, linearity, symmetry and flux conservation of the DN map
- the discrete maximum principle on random boundary data
- the boundary integral identity: zero for equal conductivities, first order or better otherwise
- face ordering, plus/minus partitions, CSV output
- the weighted boundary sweep: exact zeros for equal conductivities and its preconditions
"""
import csv
import io

import numpy as np
import pytest

from calderon_lab.bourgain import generic_k
from calderon_lab.conductivity import constant, face_matched, synth_smooth
from calderon_lab.dn import (DECAY_INTEGRALS, FdDomain, FvOperator, SolverError,
                             boundary_decay_sweep, dn_apply, identity_residual, solve_dirichlet)
from calderon_lab.grid import make_grid


@pytest.fixture(scope="module")
def box():
    return FdDomain((0.0, 0.0, 0.0), 0.75, 12, (0.0, 0.0, 1.0), 0.1)


@pytest.fixture(scope="module")
def box_grid():
    return make_grid(3, 32, 2.0)


@pytest.fixture(scope="module")
def smooth_pair(box_grid):
    g2 = synth_smooth(0.2, None, 0.5, box_grid)
    g1 = face_matched(g2, (0, 0, 0.75), (0, 0, 1), 0.5, 0.4)
    return g1, g2


class TestDomain:
    def test_geometry(self, box):
        assert box.h == pytest.approx(0.125)
        assert box.n_faces == 6 * 144
        assert box.face_area == pytest.approx(0.125**2)
        assert box.cell_centers.shape == (12, 12, 12, 3)

    def test_face_order(self, box):
        """Faces run axis by axis, lower then upper, and lie on the box surface."""
        nrm = box.face_normals
        assert np.all(nrm[:144] == [-1, 0, 0]) and np.all(nrm[144:288] == [1, 0, 0])
        assert np.all(nrm[-144:] == [0, 0, 1])
        assert np.allclose(np.max(np.abs(box.face_points), axis=1), 0.75)

    def test_partitions(self, box):
        assert box.plus_mask.sum() == 144
        assert np.all(box.face_normals[box.plus_mask] == [0, 0, 1])
        assert np.array_equal(box.minus_mask, ~box.plus_mask)

    def test_epsilon_above_one_empties_plus_set(self):
        d = FdDomain((0.0, 0.0, 0.0), 1.0, 4, (0.0, 0.0, 1.0), 1.5)
        assert not d.plus_mask.any()

    def test_validation(self):
        with pytest.raises(ValueError, match="two cells"):
            FdDomain((0.0, 0.0, 0.0), 1.0, 1)
        with pytest.raises(ValueError, match="unit vector"):
            FdDomain((0.0, 0.0, 0.0), 1.0, 4, (1.0, 1.0, 0.0))
        with pytest.raises(ValueError, match="half_width"):
            FdDomain((0.0, 0.0, 0.0), 0.0, 4)

    def test_boundary_data(self, box):
        with pytest.raises(ValueError, match="entries"):
            box.boundary_data(np.zeros(3))
        assert box.boundary_data(lambda p: p[:, 0]).shape == (box.n_faces,)

    def test_contains_ball_and_refine(self, box):
        assert box.contains_ball((0, 0, 0), 0.5)
        assert not box.contains_ball((0, 0, 0.5), 0.5)
        assert box.refined().cells == 24


class TestDirichlet:
    def test_linear_exact(self, box, box_grid):
        """Constant gamma reproduces u = a.x exactly, with flux gamma a.nu."""
        a = np.array([0.3, -1.0, 2.0])
        gam = constant(1.7, box_grid)
        res = solve_dirichlet(gam, box, lambda p: p @ a, direct=True)
        assert np.allclose(res.u, box.cell_centers.reshape(-1, 3) @ a, atol=1e-12)
        assert np.allclose(res.flux, 1.7 * box.face_normals @ a, atol=1e-10)

    def test_constant_data(self, box, smooth_pair):
        res = solve_dirichlet(smooth_pair[0], box, np.full(box.n_faces, 2.0), direct=True)
        assert np.allclose(res.u, 2.0)
        assert np.max(np.abs(res.flux)) < 1e-10

    def test_scaling(self, box, smooth_pair):
        """Doubling gamma doubles the flux and leaves u unchanged."""
        g = smooth_pair[1]
        f = box.boundary_data(lambda p: np.sin(p[:, 0]) + p[:, 2] ** 2)
        lam1 = dn_apply(g, box, f)
        lam2 = dn_apply(lambda p: 2 * g.evaluate(p), box, f)
        assert np.allclose(lam2, 2 * lam1, rtol=1e-8, atol=1e-10)

    def test_linearity(self, box, smooth_pair):
        op = FvOperator(smooth_pair[0], box)
        rng = np.random.default_rng(0)
        f, h = rng.normal(size=box.n_faces), rng.normal(size=box.n_faces)
        lhs = dn_apply(None, box, 2 * f - 3 * h, direct=True, operator=op)
        rhs = 2 * dn_apply(None, box, f, direct=True, operator=op) - 3 * dn_apply(None, box, h, direct=True, operator=op)
        assert np.allclose(lhs, rhs, atol=1e-9)

    def test_symmetry_and_conservation(self, box, smooth_pair):
        op = FvOperator(smooth_pair[0], box)
        pts = box.face_points
        f = np.cos(pts[:, 0] + 0.5 * pts[:, 1]) + pts[:, 2] ** 2
        h = np.sin(pts[:, 1] - pts[:, 2]) + pts[:, 0]
        rf = solve_dirichlet(None, box, f, operator=op)
        rh = solve_dirichlet(None, box, h, operator=op)
        sym = abs(np.sum(rf.flux * h) - np.sum(rh.flux * f)) / np.sum(np.abs(rf.flux * h))
        assert sym <= 1e-6
        assert rf.conservation_defect <= 1e-8

    def test_maximum_principle(self, smooth_pair):
        dom = FdDomain((0.0, 0.0, 0.0), 0.75, 6)
        op = FvOperator(smooth_pair[0], dom)
        rng = np.random.default_rng(1)
        for _ in range(100):
            f = rng.uniform(-1, 1, dom.n_faces)
            u = op.solve(f, direct=True)
            assert u.max() <= f.max() and u.min() >= f.min()

    def test_complex_data(self, box, smooth_pair):
        op = FvOperator(smooth_pair[1], box)
        f = np.random.default_rng(2).normal(size=box.n_faces)
        u = op.solve(f + 1j * 2 * f)
        assert np.allclose(u.imag, 2 * u.real, atol=1e-8)

    def test_cg_failure_raises(self, box, smooth_pair):
        op = FvOperator(smooth_pair[1], box)
        with pytest.raises(SolverError):
            op._cg(np.random.default_rng(3).normal(size=box.n_cells), rtol=1e-30)

    def test_rejects_nonpositive(self, box):
        with pytest.raises(ValueError, match="positive"):
            FvOperator(lambda p: -np.ones(p.shape[:-1]), box)

    def test_non_finite_data(self, box, box_grid):
        with pytest.raises(ValueError, match="finite"):
            solve_dirichlet(constant(1.0, box_grid), box, np.full(box.n_faces, np.nan))

    def test_csv(self, box, box_grid):
        res = solve_dirichlet(constant(1.0, box_grid), box, lambda p: p[:, 2], direct=True)
        rows = list(csv.reader(io.StringIO(res.to_csv())))
        assert rows[0][:4] == ["face", "x0", "x1", "x2"]
        assert len(rows) == box.n_faces + 1
        assert sum(int(r[-1]) for r in rows[1:]) == 144


class TestIdentity:
    def test_equal_conductivities_zero(self, box, smooth_pair):
        r = identity_residual(smooth_pair[0], smooth_pair[0], box, lambda p: p[:, 0], lambda p: p[:, 1] ** 2)
        assert r["lhs"] == 0.0
        assert abs(r["rhs"]) <= 1e-10

    def test_refinement_order(self, smooth_pair):
        f1 = lambda p: p[:, 0] + p[:, 2] ** 2  # noqa: E731
        f2 = lambda p: np.exp(p[:, 1])  # noqa: E731
        res = [identity_residual(*smooth_pair, FdDomain((0.0, 0.0, 0.0), 0.75, n), f1, f2, direct=True)["residual"]
               for n in (8, 16)]
        assert np.log2(res[0] / res[1]) >= 1.0


class TestDecaySweep:
    def test_control_is_exact_zero(self, box_grid, kernel3):
        g2 = synth_smooth(0.2, None, 0.5, box_grid)
        dom = FdDomain((0.0, 0.0, 0.0), 0.75, 8, (0.0, 0.0, 1.0), 0.1)
        k = np.array([2.0, 0.0, 0.0])
        tab = boundary_decay_sweep(g2, g2, kernel3, k, [8, 16], dom)
        assert set(tab.series) == set(DECAY_INTEGRALS)
        assert all(v == 0.0 for s in tab.series.values() for v in s.values)
        assert tab.passed
        assert len(tab.meta["samples"]) == 2

    def test_distinct_pair_nonzero(self, box_grid, smooth_pair, kernel3):
        dom = FdDomain((0.0, 0.0, 0.0), 0.75, 8, (0.0, 0.0, 1.0), 0.1)
        tab = boundary_decay_sweep(*smooth_pair, kernel3, np.array([2.0, 0.0, 0.0]), [8], dom)
        assert tab.series["dnu_u_plus"].values[0] > 0

    def test_preconditions(self, box_grid, smooth_pair, kernel3):
        dom = FdDomain((0.0, 0.0, 0.0), 0.75, 8, (0.0, 0.0, 1.0), 0.1)
        with pytest.raises(ValueError, match="orthogonal"):
            boundary_decay_sweep(*smooth_pair, kernel3, generic_k(2.0), [8], dom)
        big = FdDomain((0.0, 0.0, 0.0), 1.7, 8, (0.0, 0.0, 1.0), 0.1)
        with pytest.raises(ValueError, match="validity cube"):
            boundary_decay_sweep(*smooth_pair, kernel3, np.array([2.0, 0.0, 0.0]), [8], big)
        other = synth_smooth(0.2, None, 0.8, box_grid)
        with pytest.raises(ValueError, match="agree on the boundary"):
            boundary_decay_sweep(other, smooth_pair[1], kernel3, np.array([2.0, 0.0, 0.0]), [8], dom)
