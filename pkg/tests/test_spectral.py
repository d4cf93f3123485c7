import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.linalg import expm
from scipy.optimize import brentq
from scipy.special import lambertw

from sddekit import spectral
from sddekit.model import SignedMatrixMeasure

E_INV = math.exp(-1.0)


def delay_series(a, t):
    """Fundamental solution of x' = -a x(t - 1) by the method of steps."""
    return sum((-a) ** k * (t - k) ** k / math.factorial(k) for k in range(int(math.floor(t)) + 1))


class TestCharMatrix:
    def test_dirac_at_zero(self):
        A = np.array([[1.0, 2.0], [0.5, -1.0]])
        nu = SignedMatrixMeasure(1.0, [(0.0, A)])
        z = 0.3 + 1.7j
        np.testing.assert_allclose(spectral.char_matrix(nu, z), z * np.eye(2) - A)

    def test_pure_delay_vanishes_at_minus_one(self, pure_delay):
        assert abs(spectral.char_matrix(pure_delay, -1.0)[0, 0]) < 1e-15

    def test_zero_measure(self):
        nu = SignedMatrixMeasure(1.0, [(0.0, [[0.0]])])
        assert spectral.char_matrix(nu, 2 - 1j)[0, 0] == 2 - 1j

    def test_density_matches_quadrature(self):
        from scipy.integrate import quad
        nu = SignedMatrixMeasure(1.0, density=[(-0.8, -0.2, [[1.5]])])
        z = -0.4 + 2.0j
        re = quad(lambda th: 1.5 * (math.exp(z.real * th) * math.cos(z.imag * th)), -0.8, -0.2)[0]
        im = quad(lambda th: 1.5 * (math.exp(z.real * th) * math.sin(z.imag * th)), -0.8, -0.2)[0]
        assert spectral.char_matrix(nu, z)[0, 0] == pytest.approx(z - (re + 1j * im), abs=1e-12)


class TestWinding:
    def test_counts_polynomial_roots(self):
        def f(z):
            return (z - 0.5) * (z + 0.2j) * (z - 3.0)
        box = [(-1 - 1j), (1 - 1j), (1 + 1j), (-1 + 1j)]
        assert spectral.winding_number(f, box) == 2


class TestLambda0:
    def test_eigenvalue_path(self):
        nu = SignedMatrixMeasure(1.0, [(0.0, np.diag([-2.0, -0.5]))])
        res = spectral.lambda0(nu)
        assert res.lambda0 == -0.5 and res.status == "eigen"

    def test_pure_delay_double_root(self, pure_delay):
        res = spectral.lambda0(pure_delay)
        assert abs(res.lambda0 + 1.0) < 1e-6

    def test_real_dominant_root(self):
        nu = SignedMatrixMeasure(1.0, [(0.0, [[-3.0]]), (-1.0, [[1.0]])])
        oracle = brentq(lambda x: x + 3.0 - math.exp(-x), -0.8, -0.79, xtol=1e-14)
        res = spectral.lambda0(nu, tol=1e-10)
        assert res.lambda0 == pytest.approx(oracle, abs=1e-8)
        assert abs(spectral._det(nu, np.array([res.witness_root]))[0]) < 10 * 1e-8

    @pytest.mark.parametrize("a", [0.5, 1.2, 1.5])
    def test_lambert_w_oracle(self, a):
        nu = SignedMatrixMeasure(1.0, [(-1.0, [[-a]])])
        oracle = max(lambertw(-a, k).real for k in range(-3, 3))
        res = spectral.lambda0(nu, tol=1e-9)
        assert res.lambda0 == pytest.approx(oracle, abs=1e-7)
        assert abs(spectral._det(nu, np.array([res.witness_root]))[0]) < 10 * res.tol

    @given(st.floats(0.05, 1.5), st.floats(0.3, 2.0))
    def test_scaled_delay_oracle(self, a, r0):
        # lambda + a e^{-lambda r0} = 0  <=>  lambda = W(-a r0) / r0
        nu = SignedMatrixMeasure(r0, [(-r0, [[-a]])])
        oracle = max(lambertw(-a * r0, k).real for k in range(-2, 2)) / r0
        assert spectral.lambda0(nu, tol=1e-9).lambda0 == pytest.approx(oracle, abs=2e-6)


class TestGamma:
    def test_scalar_ode_first_order(self, minus_dirac):
        errs = []
        for h in (1 / 64, 1 / 128, 1 / 256):
            g = spectral.gamma_solve(minus_dirac, 4.0, h)
            errs.append(np.max(np.abs(g.values[g.m:, 0, 0] - np.exp(-g.times[g.m:]))))
        assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)
        assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)

    def test_pure_delay_steps(self, pure_delay):
        h = 1 / 128
        g = spectral.gamma_solve(pure_delay, 5.0, h)
        assert np.all(g.values[g.m:g.m + 129, 0, 0] == 1.0)
        assert g.at(2.0)[0, 0] == pytest.approx(1 - E_INV, abs=2 * h)
        for t in (2.5, 3.0, 4.25, 5.0):
            assert g.at(t)[0, 0] == pytest.approx(delay_series(E_INV, t), abs=2 * h)

    def test_zero_measure_identity(self):
        nu = SignedMatrixMeasure(1.0, [(0.0, np.zeros((2, 2)))])
        g = spectral.gamma_solve(nu, 2.0, 0.125)
        np.testing.assert_array_equal(g.values[g.m:], np.broadcast_to(np.eye(2), g.values[g.m:].shape))
        assert np.all(g.values[:g.m] == 0)

    def test_matrix_exponential(self):
        A = np.array([[-1.0, 0.5], [-0.3, -0.7]])
        nu = SignedMatrixMeasure(1.0, [(0.0, A)])
        h = 1 / 256
        g = spectral.gamma_solve(nu, 3.0, h)
        for t in (0.5, 1.0, 3.0):
            assert np.linalg.norm(g.at(t) - expm(A * t), 2) <= 5 * h

    def test_off_grid_lookup_rejected(self, minus_dirac):
        g = spectral.gamma_solve(minus_dirac, 1.0, 0.25)
        with pytest.raises(ValueError):
            g.at(0.3)

    def test_csv_round_trip(self, minus_dirac):
        g = spectral.gamma_solve(minus_dirac, 1.0, 0.25)
        lines = g.to_csv().splitlines()
        assert lines[0] == "t,G11,norm" and len(lines) == 1 + len(g.times)


class TestFourier:
    def test_scalar_ode(self, minus_dirac):
        v = spectral.gamma_fourier(minus_dirac, -0.5, 1.0)
        assert v[0, 0] == pytest.approx(E_INV, abs=1e-3)

    def test_pure_delay(self, pure_delay):
        v = spectral.gamma_fourier(pure_delay, -0.5, 2.0, lambda0_value=-1.0)
        assert v[0, 0] == pytest.approx(1 - E_INV, abs=1e-3)

    def test_small_time_near_identity(self, matrix_measure):
        v = spectral.gamma_fourier(matrix_measure, 0.0, 0.05, theta_max=4000)
        assert np.linalg.norm(v - np.eye(2)) < 0.15

    def test_requires_lambda_right_of_abscissa(self, minus_dirac):
        with pytest.raises(ValueError):
            spectral.gamma_fourier(minus_dirac, -2.0, 1.0)


class TestCk:
    def test_symmetric_dirac(self, minus_dirac):
        g = spectral.gamma_solve(minus_dirac, 20.0, 1 / 128)
        assert spectral.ck_empirical(g, 1.0) == pytest.approx(1.0)

    def test_pure_delay_at_zero(self, pure_delay):
        g = spectral.gamma_solve(pure_delay, 20.0, 1 / 128)
        assert spectral.ck_empirical(g, 0.0) == 1.0

    def test_nondecreasing_in_k(self, matrix_measure):
        g = spectral.gamma_solve(matrix_measure, 20.0, 1 / 64)
        c = spectral.ck_empirical(g, np.linspace(0, 1.1, 40))
        assert np.all(np.diff(c) >= 0)

    def test_horizon_stability_and_divergence(self, pure_delay):
        h = 1 / 64
        short = spectral.gamma_solve(pure_delay, 40.0, h)
        long = spectral.gamma_solve(pure_delay, 80.0, h)
        a, b = spectral.ck_empirical(short, 0.5), spectral.ck_empirical(long, 0.5)
        assert abs(b / a - 1) < 0.01
        a, b = spectral.ck_empirical(short, 1.5), spectral.ck_empirical(long, 1.5)
        assert b > 10 * a


class TestPpBound:
    def test_scalar_closed_form(self, minus_dirac):
        r = spectral.pp_bound(minus_dirac, -0.5)
        closed = 3 * math.pi + 4 * (1 + math.exp(0.5)) / (2 * math.exp(0.5))
        assert r.rho_lambda == 0.0
        assert r.T_lambda == pytest.approx(2 * math.exp(0.5))
        assert r.bound == pytest.approx(closed, abs=1e-6)
        assert r.bound == pytest.approx(12.638, abs=1e-3)

    def test_dominates_table(self, pure_delay, matrix_measure, minus_dirac):
        for nu in (pure_delay, matrix_measure, minus_dirac):
            lam0 = spectral.lambda0(nu).lambda0
            r = spectral.pp_bound(nu, lam0 / 2, lambda0_value=lam0)
            g = spectral.gamma_solve(nu, 15.0, 1 / 128)
            t = g.times[g.m:]
            assert np.all(g.norms()[g.m:] <= r.bound * np.exp(lam0 / 2 * t))

    def test_bound_exceeds_empirical_constant(self, minus_dirac):
        r = spectral.pp_bound(minus_dirac, -0.5)
        g = spectral.gamma_solve(minus_dirac, 20.0, 1 / 128)
        assert r.bound >= spectral.ck_empirical(g, 0.5)
