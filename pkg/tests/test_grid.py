"""Tests for the periodic spectral grid.

Validates:
- forward/inverse transform round trip and Parseval's identity
- spectral derivatives against closed forms and centred finite differences
- Sobolev norms of single modes against their closed forms
- trigonometric interpolation at off-grid points
- binary and JSON field containers
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calderon_lab.grid import (PHYSICAL, SPECTRAL, ScalarField, VectorField, field_from_json,
                               field_to_json, gradient, l2_norm, load_field, make_grid,
                               save_field, sobolev_norm, sup_norm, to_physical, to_spectral)


class TestConstruction:
    def test_geometry(self):
        """Spacing, volume and sample coordinates follow the [-L, L) convention."""
        g = make_grid(3, 16, 2.0)
        assert g.spacing == pytest.approx(0.25)
        assert g.volume == pytest.approx(64.0)
        assert g.axis[0] == pytest.approx(-2.0)
        assert g.axis[-1] == pytest.approx(2.0 - 0.25)
        assert g.mesh().shape == (3, 16, 16, 16)

    def test_resolution_limit(self):
        """The sweep bound is pi N / L, twice the per-axis Nyquist frequency."""
        g = make_grid(3, 64, np.pi)
        assert g.nyquist == pytest.approx(32.0)
        assert g.resolution_limit == pytest.approx(64.0)

    @pytest.mark.parametrize("args, match", [
        ((4, 16, 1.0), "dim"),
        ((3, 15, 1.0), "even"),
        ((3, 6, 1.0), "even"),
        ((3, 16, 0.0), "positive"),
    ])
    def test_invalid(self, args, match):
        """Bad dimensions, odd or tiny N and non-positive L are rejected."""
        with pytest.raises(ValueError, match=match):
            make_grid(*args)

    def test_nyquist_derivative_zeroed(self):
        g = make_grid(2, 8, np.pi)
        assert g.derivative_wavenumbers[4] == 0.0
        assert g.wavenumbers[4] == pytest.approx(-4.0)


class TestTransforms:
    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_round_trip(self, seed):
        """ifft(fft(f)) recovers f to round-off for random complex data."""
        g = make_grid(3, 8, 1.3)
        rng = np.random.default_rng(seed)
        f = rng.normal(size=g.shape) + 1j * rng.normal(size=g.shape)
        assert np.allclose(g.ifft(g.fft(f)), f, atol=1e-13)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_parseval(self, seed):
        """The grid L2 norm equals the H^0 norm computed from coefficients."""
        g = make_grid(2, 16, 2.5)
        f = np.random.default_rng(seed).normal(size=g.shape)
        assert g.sobolev_norm(f, 0.0) == pytest.approx(g.l2_norm(f), rel=1e-12)

    def test_single_mode_coefficient(self):
        """exp(i m pi x / L) has a single unit coefficient up to the sample shift."""
        g = make_grid(2, 16, np.pi)
        x, _ = g.coords
        c = g.fft(np.broadcast_to(np.exp(3j * x), g.shape))
        assert abs(c[3, 0]) == pytest.approx(1.0)
        assert np.sum(np.abs(c) > 1e-12) == 1


class TestDerivatives:
    def test_gradient_closed_form(self, grid32):
        """Gradient of sin(x) cos(2y) exp(cos z) matches the analytic gradient."""
        x, y, z = grid32.coords
        f = np.sin(x) * np.cos(2 * y) * np.exp(np.cos(z))
        gx = np.cos(x) * np.cos(2 * y) * np.exp(np.cos(z))
        gy = -2 * np.sin(x) * np.sin(2 * y) * np.exp(np.cos(z))
        gz = -np.sin(z) * f
        got = grid32.gradient(f)
        for a, b in zip(got, (gx, gy, gz)):
            assert np.max(np.abs(a - np.broadcast_to(b, grid32.shape))) < 1e-10

    def test_gradient_against_finite_differences(self, grid64):
        """The spectral gradient agrees with fourth-order centred differences to O(h^4)."""
        g = grid64
        x, y, _ = g.coords
        f = np.broadcast_to(np.exp(np.sin(x) + 0.5 * np.cos(y)), g.shape)
        h = g.spacing
        fd = (-np.roll(f, -2, 0) + 8 * np.roll(f, -1, 0) - 8 * np.roll(f, 1, 0) + np.roll(f, 2, 0)) / (12 * h)
        assert np.max(np.abs(g.gradient(f)[0] - fd)) < 5e-4

    def test_laplacian_is_divergence_of_gradient(self, grid16):
        rng = np.random.default_rng(1)
        f = rng.normal(size=grid16.shape)
        assert np.allclose(grid16.laplacian(f), grid16.divergence(grid16.gradient(f)), atol=1e-10)

    def test_hessian_trace(self, grid16):
        rng = np.random.default_rng(2)
        f = rng.normal(size=grid16.shape)
        hs = grid16.hessian(f)
        assert np.allclose(np.trace(hs), grid16.laplacian(f), atol=1e-10)
        assert np.allclose(hs[0, 1], hs[1, 0])


class TestSobolev:
    @pytest.mark.parametrize("order", [0.0, 0.5, 1.0, 1.5, 2.0])
    def test_single_mode(self, order):
        """||exp(i m.x)||_{H^s} = (2L)^{d/2} (1 + |m|^2)^{s/2} on the torus."""
        g = make_grid(3, 16, np.pi)
        x, y, z = g.coords
        f = np.broadcast_to(np.exp(1j * (2 * x - y + 3 * z)), g.shape)
        expect = np.sqrt(g.volume) * (1 + 14.0) ** (order / 2)
        assert g.sobolev_norm(f, order) == pytest.approx(expect, rel=1e-12)

    def test_homogeneous_kills_constants(self, grid16):
        assert grid16.sobolev_norm(np.ones(grid16.shape), 1.0, homogeneous=True) == 0.0

    def test_h1_against_quadrature(self, grid32):
        """H^1 norm squared equals ||f||^2 + ||grad f||^2 computed in physical space."""
        x, y, z = grid32.coords
        f = np.broadcast_to(np.exp(np.cos(x) * np.sin(y) + 0.3 * np.cos(z)), grid32.shape)
        grad = grid32.gradient(f)
        quad = grid32.l2_norm(f) ** 2 + sum(grid32.l2_norm(gj) ** 2 for gj in grad)
        assert grid32.sobolev_norm(f, 1.0) ** 2 == pytest.approx(quad, rel=1e-10)

    def test_negative_order(self, grid16):
        with pytest.raises(ValueError, match="non-negative"):
            grid16.sobolev_norm(np.ones(grid16.shape), -1.0)


class TestInterpolation:
    def test_off_grid_points(self, grid32):
        """The interpolant of a band-limited function is exact between samples."""
        x, y, z = grid32.coords
        f = np.broadcast_to(np.cos(x) * np.sin(2 * y) + np.cos(3 * z), grid32.shape)
        pts = np.random.default_rng(3).uniform(-3, 3, size=(50, 3))
        exact = np.cos(pts[:, 0]) * np.sin(2 * pts[:, 1]) + np.cos(3 * pts[:, 2])
        assert np.max(np.abs(grid32.interpolate(f, pts).real - exact)) < 1e-12

    def test_tensor_derivative(self, grid32):
        """Derivative interpolation on a tensor grid matches the analytic derivative."""
        x, y, z = grid32.coords
        f = np.broadcast_to(np.sin(x) * np.cos(y) * np.cos(2 * z), grid32.shape)
        axes = [np.linspace(-1, 1, 5)] * 3
        got = grid32.interpolate_tensor(f, axes, derivative=2).real
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        assert np.max(np.abs(got - (-2 * np.sin(X) * np.cos(Y) * np.sin(2 * Z)))) < 1e-12


class TestFields:
    def test_representation_switch(self, grid16):
        rng = np.random.default_rng(4)
        f = ScalarField(grid16, rng.normal(size=grid16.shape))
        s = to_spectral(f)
        assert s.representation == SPECTRAL
        assert np.allclose(to_physical(s).values, f.values)
        assert l2_norm(f) == pytest.approx(l2_norm(s))
        assert sobolev_norm(f, 1.0) == pytest.approx(sobolev_norm(s, 1.0))

    def test_gradient_field_and_sup(self, grid16):
        x, _, _ = grid16.coords
        f = ScalarField(grid16, np.broadcast_to(np.sin(x), grid16.shape).copy())
        gf = gradient(f)
        assert isinstance(gf, VectorField)
        assert sup_norm(gf) == pytest.approx(1.0, abs=1e-12)

    def test_shape_validation(self, grid16):
        with pytest.raises(ValueError):
            ScalarField(grid16, np.zeros((4, 4, 4)))
        with pytest.raises(ValueError, match="unknown representation"):
            ScalarField(grid16, np.zeros(grid16.shape), "wavelet")


class TestSerialisation:
    def test_binary_round_trip(self, tmp_path, grid16):
        rng = np.random.default_rng(5)
        f = ScalarField(grid16, rng.normal(size=grid16.shape) + 1j * rng.normal(size=grid16.shape),
                        SPECTRAL)
        save_field(f, tmp_path / "f.field")
        back = load_field(tmp_path / "f.field")
        assert back.grid.shape == grid16.shape and back.grid.half_length == grid16.half_length
        assert back.representation == SPECTRAL
        assert np.array_equal(back.values, f.values)

    def test_binary_vector(self, tmp_path, grid16):
        v = VectorField(grid16, np.random.default_rng(6).normal(size=(3,) + grid16.shape))
        save_field(v, tmp_path / "v.field")
        back = load_field(tmp_path / "v.field")
        assert isinstance(back, VectorField)
        assert np.array_equal(back.values.real, v.values)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.field"
        p.write_bytes(b"\0" * 64)
        with pytest.raises(ValueError, match="not a field container"):
            load_field(p)

    def test_json_round_trip(self):
        g = make_grid(2, 8, 1.0)
        f = ScalarField(g, np.arange(64.0).reshape(8, 8), PHYSICAL)
        back = field_from_json(field_to_json(f))
        assert isinstance(back, ScalarField)
        assert np.array_equal(back.values.real, f.values)
