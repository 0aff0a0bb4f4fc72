import numpy as np
import pytest
from scipy.integrate import quad

from octmoco.core import Boundaries, ZDisplacementMap, apply_z_displacement, Volume
from octmoco.linalg import (
    Poly4,
    coordinate_matrix,
    line_fit,
    ls_line_project,
    poly4_fit,
    poly_arclength,
    projection_matrix,
    tilt_displacement,
)


def arclength_oracle(p: Poly4, k_max, z_scale, h_scale):
    dp = np.polynomial.polynomial.polyder(p.coeffs)

    def integrand(k):
        return np.hypot(h_scale, z_scale * np.polynomial.polynomial.polyval(k, dp))

    val, err = quad(integrand, 0.0, k_max, limit=200)
    assert err < 1e-6 * max(val, 1.0)
    return val


class TestLineProjection:
    def test_affine_input_is_fixed_point(self):
        w, n = 8, 5
        x = np.arange(w, dtype=np.float32)[:, None]
        d = ZDisplacementMap(0.3 * x + 1.5 + np.zeros((w, n), np.float32))
        out = ls_line_project(d)
        np.testing.assert_allclose(out.values, d.values, atol=1e-6)

    def test_hand_solved_three_point_case(self):
        d = ZDisplacementMap(np.array([[0.0], [1.0], [0.0]], dtype=np.float32))
        out = ls_line_project(d)
        np.testing.assert_allclose(out.values[:, 0], [1 / 3, 1 / 3, 1 / 3], atol=1e-7)
        beta = line_fit(d).beta
        assert beta[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert beta[1, 0] == pytest.approx(1 / 3, abs=1e-12)

    def test_matches_normal_equation_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            w = int(rng.integers(2, 30))
            n = int(rng.integers(1, 8))
            d = ZDisplacementMap(rng.standard_normal((w, n)).astype(np.float32))
            x = coordinate_matrix(w)
            expect = np.empty((w, n))
            for y in range(n):
                beta = np.linalg.solve(x.T @ x, x.T @ d.values[:, y].astype(np.float64))
                expect[:, y] = x @ beta
            got = ls_line_project(d).values
            assert np.max(np.abs(got - expect)) <= 1e-9 * max(1.0, np.max(np.abs(expect)))

    def test_idempotent(self):
        rng = np.random.default_rng(1)
        d = ZDisplacementMap(rng.standard_normal((16, 6)).astype(np.float32))
        once = ls_line_project(d)
        twice = ls_line_project(once)
        assert np.max(np.abs(twice.values - once.values)) < 1e-9

    def test_residual_orthogonal_to_line_space(self):
        rng = np.random.default_rng(2)
        d = ZDisplacementMap(rng.standard_normal((12, 5)).astype(np.float32))
        resid = d.values.astype(np.float64) - ls_line_project(d).values
        x = coordinate_matrix(12)
        np.testing.assert_allclose(x.T @ resid, 0.0, atol=1e-8)

    def test_projection_matrix_is_projection(self):
        p = projection_matrix(10)
        np.testing.assert_allclose(p @ p, p, atol=1e-12)


class TestPoly4Fit:
    def test_recovers_exact_quartic(self):
        coeffs = np.array([2.0, -1.0, 0.5, -0.02, 0.001])
        for k in (5, 16, 257, 1024):
            t = np.arange(k, dtype=np.float64)
            z = np.polynomial.polynomial.polyval(t, coeffs)
            got = poly4_fit(z).coeffs
            np.testing.assert_allclose(got, coeffs, rtol=1e-6, atol=1e-9)

    def test_constant_samples(self):
        got = poly4_fit(np.full(9, 3.25)).coeffs
        np.testing.assert_allclose(got, [3.25, 0, 0, 0, 0], atol=1e-9)

    def test_local_optimality_against_perturbations(self):
        rng = np.random.default_rng(3)
        t = np.arange(41, dtype=np.float64)
        z = 0.01 * (t - 20) ** 2 + rng.normal(0, 0.5, size=41)
        p = poly4_fit(z)
        vand = np.vander(t, 5, increasing=True)
        best = np.sum((z - vand @ p.coeffs) ** 2)
        scale = np.maximum(np.abs(p.coeffs), 1e-6)
        for _ in range(50):
            perturbed = p.coeffs + rng.normal(0, 1e-4, size=5) * scale
            assert np.sum((z - vand @ perturbed) ** 2) >= best - 1e-12

    def test_model_nesting_beats_constant_fit(self):
        rng = np.random.default_rng(4)
        z = rng.standard_normal(25)
        p = poly4_fit(z)
        t = np.arange(25, dtype=np.float64)
        quartic_resid = np.sum((z - p(t)) ** 2)
        const_resid = np.sum((z - z.mean()) ** 2)
        assert quartic_resid <= const_resid + 1e-12

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            poly4_fit(np.zeros(4))


class TestArcLength:
    def test_constant_curve_equals_chord(self):
        p = Poly4(np.array([7.0, 0, 0, 0, 0]))
        assert poly_arclength(p, 10, 0.5, 0.25) == pytest.approx(10 * 0.25, rel=1e-12)

    def test_linear_curve_pythagoras(self):
        slope, z_scale, h_scale, k_max = 0.8, 0.3, 0.2, 12
        p = Poly4(np.array([1.0, slope, 0, 0, 0]))
        expect = k_max * np.hypot(h_scale, z_scale * slope)
        assert poly_arclength(p, k_max, z_scale, h_scale) == pytest.approx(expect, rel=1e-12)

    def test_parabola_matches_quadrature(self):
        p = Poly4(np.array([0.0, 0.0, 0.05, 0.0, 0.0]))
        got = poly_arclength(p, 20, 0.4, 0.1)
        expect = arclength_oracle(p, 20, 0.4, 0.1)
        assert got == pytest.approx(expect, rel=1e-4)

    def test_quartic_matches_quadrature(self):
        p = Poly4(np.array([5.0, 0.3, -0.04, 1e-3, -1e-5]))
        got = poly_arclength(p, 30, 0.25, 0.15)
        expect = arclength_oracle(p, 30, 0.25, 0.15)
        assert got == pytest.approx(expect, rel=1e-4)

    def test_arc_never_shorter_than_chord(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = Poly4(rng.normal(0, [5, 0.5, 0.05, 1e-3, 1e-5]))
            k_max = int(rng.integers(2, 40))
            arc = poly_arclength(p, k_max, 0.3, 0.2)
            chord = np.hypot(0.2 * k_max, 0.3 * (p(k_max) - p(0.0)))
            assert arc >= chord - 1e-12


class TestTiltDisplacement:
    @staticmethod
    def _bounds_from_rpe(rpe):
        return Boundaries(np.stack([rpe - 5.0, rpe]).astype(np.float32))

    def test_equal_corners_constant_displacement(self):
        rpe = np.full((6, 4), 12.0)
        d = tilt_displacement(self._bounds_from_rpe(rpe), h_ref=30.0)
        np.testing.assert_allclose(d.values, 18.0, atol=1e-6)

    def test_corners_map_exactly_to_reference(self):
        rng = np.random.default_rng(6)
        rpe = rng.uniform(10, 40, size=(7, 5))
        b = self._bounds_from_rpe(rpe)
        d = tilt_displacement(b, h_ref=50.0)
        for cx, cy in [(0, 0), (-1, 0), (0, -1), (-1, -1)]:
            assert rpe[cx, cy] + d.values[cx, cy] == pytest.approx(50.0, abs=1e-5)

    def test_interior_matches_hand_bilinear(self):
        rng = np.random.default_rng(7)
        rpe = rng.uniform(10, 40, size=(5, 4))
        w, n = rpe.shape
        d = tilt_displacement(self._bounds_from_rpe(rpe), h_ref=100.0)
        for x in range(w):
            for y in range(n):
                u = x / (w - 1)
                v = y / (n - 1)
                interp = (
                    rpe[0, 0] * (1 - u) * (1 - v)
                    + rpe[-1, 0] * u * (1 - v)
                    + rpe[0, -1] * (1 - u) * v
                    + rpe[-1, -1] * u * v
                )
                assert d.values[x, y] == pytest.approx(100.0 - interp, abs=1e-4)

    def test_planar_rpe_flattened_exactly(self):
        # a tilted plane is its own bilinear corner interpolation
        x = np.arange(8, dtype=np.float64)[:, None]
        y = np.arange(6, dtype=np.float64)[None, :]
        rpe = 10.0 + 0.5 * x + 0.25 * y
        b = self._bounds_from_rpe(rpe)
        d = tilt_displacement(b, h_ref=40.0)
        np.testing.assert_allclose(rpe + d.values, 40.0, atol=1e-5)
