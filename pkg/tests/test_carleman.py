"""Tests for the Carleman-estimate evaluators.

Validates:
- the conjugated Laplacian on plane waves against its closed-form symbol
- interior ratios, including the support precondition
- ball and box quadrature rules (self-tests, areas, volumes)
- boundary integrals for a linear function on a sphere against closed forms
- the trace constant 3/R for constants and the divergence identity
"""
import numpy as np
import pytest

from calderon_lab.carleman import (AnalyticSampler, QuadDomain, QuadratureError,
                                   SpectralSampler, absorption_margin, boundary_report,
                                   conjugated_laplacian, conjugated_perturbed,
                                   divergence_consistency, interior_ratio, trace_check)
from calderon_lab.conductivity import bump, constant, log_data
from calderon_lab.mollifier import make_pair


def gaussian_sampler():
    """u = exp(-|x|^2)(1 + x0 x2) with its exact gradient."""
    def val(p):
        return np.exp(-np.sum(p**2, 1)) * (1 + p[:, 0] * p[:, 2])

    def grad(p):
        e = np.exp(-np.sum(p**2, 1))
        g = -2 * p * (e * (1 + p[:, 0] * p[:, 2]))[:, None]
        g[:, 0] += e * p[:, 2]
        g[:, 2] += e * p[:, 0]
        return g
    return AnalyticSampler(val, grad)


class TestConjugatedOperator:
    def test_plane_wave_symbol(self, grid16):
        """exp(i xi.x) is an eigenfunction with eigenvalue |xi|^2 - 2it eta.xi - t^2."""
        x, y, z = grid16.coords
        xi = np.array([1.0, -2.0, 3.0])
        u = np.broadcast_to(np.exp(1j * (xi[0] * x + xi[1] * y + xi[2] * z)), grid16.shape)
        eta = np.array([0.6, 0.0, 0.8])
        t = 3.0
        lam = xi @ xi - 2j * t * (eta @ xi) - t * t
        assert np.allclose(conjugated_laplacian(u, t, eta, grid16), lam * u, atol=1e-10)
        ratio = interior_ratio(u, t, eta, grid=grid16)
        assert ratio == pytest.approx(abs(lam) ** 2 / (t * t + xi @ xi), rel=1e-10)

    def test_perturbed_reduces_for_unit_gamma(self, grid16, kernel3):
        lg = log_data(constant(1.0, grid16))
        pair = make_pair(lg, 4.0, kernel3)
        u = np.random.default_rng(0).normal(size=grid16.shape)
        eta = np.array([0.0, 0.0, 1.0])
        assert np.allclose(conjugated_perturbed(u, 4.0, eta, lg, pair),
                           conjugated_laplacian(u, 4.0, eta, grid16))
        assert absorption_margin(lg, pair) == dict(two_sup_da_sq=0.0, two_sup_q_sq_over_t2=0.0)

    def test_eta_must_be_unit(self, grid16):
        with pytest.raises(ValueError, match="unit"):
            conjugated_laplacian(np.ones(grid16.shape), 1.0, [1.0, 1.0, 0.0], grid16)


class TestInteriorRatio:
    def test_bump_ratio(self, grid32, bump32, kernel3):
        dom = QuadDomain.ball(np.zeros(3), 0.6 * np.pi, 16, 32, 8)
        u = bump(grid32.radius() ** 2 / (0.4 * np.pi) ** 2)
        eta = [0.0, 0.0, 1.0]
        lg = log_data(bump32)
        for t in (5.0, 10.0):
            assert interior_ratio(u, t, eta, domain=dom, grid=grid32) >= 0.1
            assert interior_ratio(u, t, eta, "perturbed", lg, make_pair(lg, t, kernel3), dom, grid32) >= 0.1

    def test_support_precondition(self, grid16):
        dom = QuadDomain.ball(np.zeros(3), 1.0, 8, 16, 4)
        with pytest.raises(ValueError, match="vanish"):
            interior_ratio(np.ones(grid16.shape), 1.0, [0, 0, 1.0], domain=dom, grid=grid16)

    def test_mode_validation(self, grid16):
        u = np.ones(grid16.shape)
        with pytest.raises(ValueError, match="unknown mode"):
            interior_ratio(u, 1.0, [0, 0, 1.0], mode="other", grid=grid16)
        with pytest.raises(ValueError, match="perturbed mode"):
            interior_ratio(u, 1.0, [0, 0, 1.0], mode="perturbed", grid=grid16)
        with pytest.raises(ValueError, match="vanish identically"):
            interior_ratio(0 * u, 1.0, [0, 0, 1.0], grid=grid16)


class TestQuadrature:
    def test_ball(self):
        d = QuadDomain.ball([0.1, 0.0, -0.2], 0.7)
        rep = d.self_test()
        assert rep["area_error"] < 1e-12 and rep["volume_error"] < 1e-12
        assert d.boundary_weights.sum() == pytest.approx(4 * np.pi * 0.49)
        assert d.signed_distance(np.array([[0.1, 0.0, -0.2]]))[0] == pytest.approx(0.7)

    def test_disc(self):
        d = QuadDomain.ball([0.0, 0.0], 1.0)
        assert d.boundary_weights.sum() == pytest.approx(2 * np.pi)
        assert d.interior_weights.sum() == pytest.approx(np.pi)

    def test_box(self):
        d = QuadDomain.box([0, 0, 0], [1.0, 2.0, 0.5], n=6)
        assert d.interior_weights.sum() == pytest.approx(1.0)
        assert d.boundary_weights.sum() == pytest.approx(2 * (2 + 0.5 + 1))
        assert d.signed_distance(np.array([[2.0, 1.0, 0.25]]))[0] == pytest.approx(-1.0)

    def test_underresolved_rule_fails_self_test(self):
        with pytest.raises(QuadratureError):
            QuadDomain.ball(np.zeros(3), 1.0, n_theta=1, n_phi=2, n_radial=1)

    def test_invalid(self):
        with pytest.raises(ValueError):
            QuadDomain.ball(np.zeros(3), 0.0)
        with pytest.raises(ValueError):
            QuadDomain.box([0, 0, 0], [1, 0, 1])


class TestBoundaryReport:
    @pytest.mark.parametrize("t", [0.5, 2.0])
    def test_linear_closed_forms(self, t):
        """u = x3 on the sphere of radius R: every term has a closed form."""
        r = 0.7
        rep = boundary_report(AnalyticSampler.linear([0, 0, 1.0]), t, [0, 0, 1.0],
                              QuadDomain.ball(np.zeros(3), r))
        vol = 4 * np.pi * r**3 / 3
        assert rep.volume_terms["vol_t2_u2"] == pytest.approx(t * t * vol * r * r / 5, rel=1e-10)
        assert rep.volume_terms["vol_grad2"] == pytest.approx(vol, rel=1e-10)
        assert rep.boundary_terms["bnd_t2_u2"] == pytest.approx(t * t * 4 * np.pi * r**4 / 3, rel=1e-10)
        assert rep.boundary_terms["bnd_u_dnu_re"] == pytest.approx(vol, rel=1e-10)
        for key in ("bnd_4t_re", "bnd_2t_grad", "bnd_2t3_u2", "bnd_u_dnu_im"):
            assert abs(rep.boundary_terms[key]) < 1e-10
        # P u = -2t - t^2 x3 for u = x3, so rhs = 4 t^2 vol + t^4 vol R^2 / 5
        assert rep.rhs == pytest.approx(4 * t * t * vol + t**4 * vol * r * r / 5, rel=1e-10)

    def test_json(self):
        rep = boundary_report(AnalyticSampler.constant(), 1.0, [0, 0, 1.0],
                              QuadDomain.ball(np.zeros(3), 1.0, 8, 16, 4))
        assert '"boundary_terms"' in rep.to_json()


class TestTrace:
    @pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
    def test_constant(self, r):
        """For u = 1 the bracket is the volume, so C = area / volume = 3/R."""
        tc = trace_check(AnalyticSampler.constant(), QuadDomain.ball(np.zeros(3), r))
        assert tc["fitted_C"] == pytest.approx(3.0 / r, rel=1e-12)

    def test_refinement_stable(self):
        u = gaussian_sampler()
        a = trace_check(u, QuadDomain.ball(np.zeros(3), 1.0, 12, 24, 8))["fitted_C"]
        b = trace_check(u, QuadDomain.ball(np.zeros(3), 1.0, 24, 48, 16))["fitted_C"]
        assert abs(a - b) <= 1e-6 * b

    def test_zero(self):
        with pytest.raises(ValueError):
            trace_check(AnalyticSampler.constant(0.0), QuadDomain.ball(np.zeros(3), 1.0, 8, 16, 4))


class TestSamplers:
    def test_spectral_matches_analytic(self, grid32):
        x, y, z = grid32.coords
        u = np.broadcast_to(np.sin(x) * np.cos(y) + np.cos(2 * z), grid32.shape)
        smp = SpectralSampler(grid32, u)
        assert smp.modes is not None
        p = np.random.default_rng(1).uniform(-1, 1, (20, 3))
        val, grad, lap = smp(p)
        assert np.allclose(val, np.sin(p[:, 0]) * np.cos(p[:, 1]) + np.cos(2 * p[:, 2]))
        assert np.allclose(grad[:, 2], -2 * np.sin(2 * p[:, 2]))
        assert np.allclose(lap, -2 * np.sin(p[:, 0]) * np.cos(p[:, 1]) - 4 * np.cos(2 * p[:, 2]))

    def test_dense_path(self, grid16):
        x, y, z = grid16.coords
        u = np.broadcast_to(np.exp(-(x**2 + y**2 + z**2)), grid16.shape)
        smp = SpectralSampler(grid16, u, max_modes=10)
        assert smp.modes is None
        val, _, _ = smp(np.zeros((1, 3)))
        assert val[0] == pytest.approx(1.0, abs=1e-3)

    def test_divergence_consistency_linear(self):
        """For u = x.a: Lap(u^2) = 2|a|^2, so both sides equal 2|a|^2 vol."""
        a = np.array([1.0, 2.0, -1.0])
        d = divergence_consistency(AnalyticSampler.linear(a), QuadDomain.ball(np.zeros(3), 0.8))
        assert d["volume"] == pytest.approx(2 * (a @ a) * 4 * np.pi * 0.8**3 / 3, rel=1e-10)
        assert d["relative"] < 1e-10
