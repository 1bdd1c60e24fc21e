import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from plansmooth.grids import AxisGrid, DensityField, MarginalSet, ProductGrid, gaussian, gaussian_plan, marginal, product_plan
from plansmooth.kernel import KernelSpec, convolve
from plansmooth.smoothing import y_grid
from plansmooth.sobolev import (SobolevConfig, d1p_distance, energy, finite_integral_check, fisher_integrand,
                                gradient, p_power, p_root, p_root_gradient)

P2 = SobolevConfig(2.0)


def gaussian_wave(g):
    """Square root of the standard normal density."""
    x = g.nodes
    return np.exp(-x**2 / 4) / (2 * np.pi) ** 0.25


class TestSobolevConfig:
    @pytest.mark.parametrize("p", [0.5, 0.0, -1.0, float("nan")])
    def test_rejects_p_below_one(self, p):
        with pytest.raises(ValueError):
            SobolevConfig(p)

    def test_rejects_nonpositive_floor(self):
        with pytest.raises(ValueError):
            SobolevConfig(2.0, density_floor=0.0)


class TestGradient:
    def test_constant_field(self):
        g = AxisGrid.covering(0, 1, 20, dim=2)
        grad = gradient(DensityField(g, np.full((20, 20), 3.0)))
        for comp in grad.components:
            assert_allclose(comp, 0.0, atol=1e-12)

    def test_linear_field_interior(self):
        g = AxisGrid.covering(0, 1, 30)
        grad = gradient(DensityField(g, g.nodes))
        assert_allclose(grad[0][1:-1], 1.0, rtol=1e-12)

    def test_too_few_nodes(self):
        g = AxisGrid(0.0, 1.0, 2)
        with pytest.raises(ValueError):
            gradient(DensityField(g, [1.0, 2.0]))

    def test_gaussian_second_order(self):
        errors = []
        for n in (128, 256, 512):
            g = AxisGrid.covering(-8, 8, n)
            rho = gaussian(g, normalize=False)
            x = g.nodes
            err = np.abs(gradient(rho)[0] + x * rho.values).max()
            # leading truncation term h^2/6 * max|rho'''|
            third = np.abs((3 * x - x**3) * rho.values).max()
            assert err <= 1.05 * third / 6 * g.spacing**2
            errors.append(err)
        orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        assert np.all(orders >= 1.9)


class TestPRootGradient:
    def test_p_one_is_plain_gradient(self):
        g = AxisGrid.covering(-5, 5, 64)
        rho = gaussian(g)
        assert_allclose(p_root_gradient(rho, SobolevConfig(1.0))[0], gradient(rho)[0])

    def test_square_of_wave(self):
        g = AxisGrid.covering(-8, 8, 256)
        w = gaussian_wave(g)
        pr = p_root_gradient(DensityField(g, w**2), P2)[0]
        assert np.abs(pr - (-g.nodes / 2 * w)).max() <= 2 * g.spacing**2

    def test_zero_field(self):
        g = AxisGrid.covering(0, 1, 16)
        assert_allclose(p_root_gradient(DensityField(g, np.zeros(16)), P2)[0], 0.0)


class TestEnergy:
    @pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
    def test_gaussian_closed_form(self, sigma):
        g = AxisGrid.covering(-8 * sigma, 8 * sigma, 512)
        e = energy(gaussian(g, 0.0, sigma**2), P2)
        assert e == pytest.approx(1 / (4 * sigma**2), rel=1e-4)

    def test_translation_by_whole_cells(self):
        g = AxisGrid.covering(-12, 12, 240)
        a = energy(gaussian(g, 0.0, 1.0, normalize=False), P2)
        b = energy(gaussian(g, 7 * g.spacing, 1.0, normalize=False), P2)
        assert a == pytest.approx(b, abs=1e-12)

    def test_product_plan_adds_marginal_energies(self):
        g = AxisGrid.covering(-8, 9, 128)
        ms = MarginalSet((gaussian(g, 0, 1), gaussian(g, 1, 0.5)))
        total = energy(product_plan(ms), P2)
        assert total == pytest.approx(energy(ms[0], P2) + energy(ms[1], P2), abs=1e-6)


class TestD1pDistance:
    def test_self_distance_is_zero(self):
        g = AxisGrid.covering(-6, 6, 100)
        rho = gaussian(g)
        assert d1p_distance(rho, rho, P2) == 0.0

    def test_symmetric(self):
        g = AxisGrid.covering(-6, 6, 100)
        a, b = gaussian(g, 0, 1), gaussian(g, 0.7, 1.3)
        assert d1p_distance(a, b, P2) == pytest.approx(d1p_distance(b, a, P2), abs=1e-12)

    def test_shifted_unit_gaussians(self):
        # closed form: Hellinger part 2 - 2 e^{-s^2/8}, gradient part
        # 1/2 - (1/2) e^{-s^2/8} (1 - s^2/4) for a shift s
        s = 0.5
        e = math.exp(-s * s / 8)
        oracle = math.sqrt(2 - 2 * e + 0.5 - 0.5 * e * (1 - s * s / 4))
        g = AxisGrid.covering(-10, 10.5, 1024)
        assert d1p_distance(gaussian(g, 0, 1), gaussian(g, s, 1), P2) == pytest.approx(oracle, abs=1e-4)

    def test_grid_mismatch(self):
        a = gaussian(AxisGrid.covering(-6, 6, 100))
        b = gaussian(AxisGrid.covering(-6, 6, 50))
        with pytest.raises(ValueError):
            d1p_distance(a, b, P2)


class TestFiniteIntegralCheck:
    def test_gaussian_converges_to_four_times_energy(self):
        g = AxisGrid.covering(-8, 8, 512)
        rho = gaussian(g)
        out = finite_integral_check(rho, P2, levels=4)
        assert out.verdict == "convergent"
        assert out.limit == pytest.approx(4 * energy(rho, P2), abs=1e-3)

    def test_sine_counterexample_diverges(self):
        p = 2.0
        out = finite_integral_check(lambda g: np.sin(g.nodes) ** (p - 1), SobolevConfig(p), levels=4,
                                    grid=AxisGrid.covering(0, math.pi, 64))
        assert out.verdict == "divergent"
        assert all(r >= 1.1 for r in out.ratios)
        assert np.all(np.diff(out.integrals) > 0)

    def test_constant_is_convergent_with_zero_integrals(self):
        g = AxisGrid.covering(0, 1, 64)
        out = finite_integral_check(DensityField(g, np.ones(64)), P2, levels=3)
        assert out.verdict == "convergent"
        assert_allclose(out.integrals, 0.0, atol=1e-12)

    def test_needs_two_levels(self):
        g = AxisGrid.covering(0, 1, 64)
        with pytest.raises(ValueError):
            finite_integral_check(DensityField(g, np.ones(64)), P2, levels=1)


class TestPowers:
    def test_p_one_is_identity(self):
        g = AxisGrid.covering(-4, 4, 40)
        rho = gaussian(g)
        cfg = SobolevConfig(1.0)
        assert_allclose(p_power(rho, cfg).values, rho.values)
        assert_allclose(p_root(rho, cfg).values, rho.values)

    @pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
    def test_root_inverts_power(self, p):
        g = AxisGrid.covering(-4, 4, 40)
        rho = gaussian(g)
        cfg = SobolevConfig(p)
        assert_allclose(p_root(p_power(rho, cfg), cfg).values, rho.values, rtol=1e-12)

    def test_square_of_wave_is_a_density(self):
        g = AxisGrid.covering(-8, 8, 256)
        sq = p_power(DensityField(g, gaussian_wave(g)), P2)
        assert not sq.probability
        assert sq.mass == pytest.approx(1.0, abs=1e-6)


exponents = st.sampled_from([1.0, 1.5, 2.0, 3.0])


def mixture_density(g, params):
    x = g.nodes
    vals = sum(w * np.exp(-(x - m) ** 2 / (2 * s)) / np.sqrt(2 * np.pi * s) for w, m, s in params)
    return DensityField(g, vals).normalized()


mixture_params = st.lists(st.tuples(st.floats(0.1, 1.0), st.floats(-2.0, 2.0), st.floats(0.3, 2.0)),
                          min_size=1, max_size=3)
GRID = AxisGrid.covering(-12, 12, 192)


class TestSobolevProperties:
    @settings(max_examples=30, deadline=None)
    @given(mixture_params, exponents)
    def test_energy_nonnegative(self, params, p):
        assert energy(mixture_density(GRID, params), SobolevConfig(p)) >= 0.0

    @settings(max_examples=30, deadline=None)
    @given(mixture_params, exponents, st.floats(0.1, 10.0))
    def test_energy_scales_linearly(self, params, p, s):
        rho = mixture_density(GRID, params)
        scaled = DensityField(GRID, s * rho.values)
        cfg = SobolevConfig(p, density_floor=1e-300)
        assert energy(scaled, cfg) == pytest.approx(s * energy(rho, cfg), rel=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(mixture_params, mixture_params, mixture_params, exponents)
    def test_triangle_inequality(self, pa, pb, pc, p):
        a, b, c = (mixture_density(GRID, q) for q in (pa, pb, pc))
        cfg = SobolevConfig(p)
        assert d1p_distance(a, c, cfg) <= d1p_distance(a, b, cfg) + d1p_distance(b, c, cfg) + 1e-10

    @settings(max_examples=30, deadline=None)
    @given(mixture_params, mixture_params)
    def test_zero_distance_iff_equal(self, pa, pb):
        a, b = mixture_density(GRID, pa), mixture_density(GRID, pb)
        dist = d1p_distance(a, b, P2)
        if np.array_equal(a.values, b.values):
            assert dist == 0.0
        else:
            assert dist > 0.0

    @settings(max_examples=30, deadline=None)
    @given(mixture_params, exponents)
    def test_chain_rule_matches_fisher_form(self, params, p):
        rho = mixture_density(GRID, params)
        cfg = SobolevConfig(p)
        lhs = energy(rho, cfg)
        rhs = p**-p * fisher_integrand(rho, cfg).sum() * GRID.spacing
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-300)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-0.9, 0.9), st.floats(0.5, 2.0), exponents)
    def test_superadditivity_over_marginals(self, corr, var, p):
        g = AxisGrid.covering(-8, 8, 48)
        cov = np.array([[var, corr * var], [corr * var, var]])
        mu = gaussian_plan(ProductGrid.power(g, 2), [0.0, 0.3], cov)
        cfg = SobolevConfig(p)
        parts = sum(energy(marginal(mu, j), cfg) for j in range(2))
        assert energy(mu, cfg) + 1e-8 >= parts

    @settings(max_examples=15, deadline=None)
    @given(mixture_params, st.sampled_from([1.5, 2.0, 3.0]))
    def test_mollification_does_not_raise_energy(self, params, p):
        rho = mixture_density(GRID, params)
        cfg = SobolevConfig(p)
        ref = energy(rho, cfg)
        for eps in (0.4, 0.2, 0.1, 0.05, 0.025):
            sm = convolve(rho, KernelSpec(eps), target=y_grid(GRID, eps))
            assert energy(sm, cfg) <= ref + 1e-8
