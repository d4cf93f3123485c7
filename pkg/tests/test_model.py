import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sddekit.model import (DiscreteDelay, FsdeModel, LinearDrift, ModelValidationError, Segment,
                           SemiLinearModel, SignedMatrixMeasure, TanhDelay, ZeroDelay, ZeroDrift,
                           apply_measure, grid_steps, nu_total_variation_norm,
                           probe_dissipativity, validate_model)

E_INV = math.exp(-1.0)
finite = st.floats(-10, 10, allow_nan=False)


def ou(sigma=1.0, r0=1.0):
    return FsdeModel(1, r0, LinearDrift([[-1.0]]), ZeroDelay(), [[sigma]])


class TestSegment:
    def test_grid_alignment(self):
        assert grid_steps(1.0, 0.25) == 4
        with pytest.raises(ModelValidationError):
            grid_steps(1.0, 0.3)

    def test_wrong_length_rejected(self):
        with pytest.raises(ModelValidationError):
            Segment(1.0, 0.25, np.zeros(3))

    def test_nonfinite_rejected(self):
        with pytest.raises(ModelValidationError):
            Segment(1.0, 0.5, [0.0, np.nan, 1.0])

    def test_interpolation_between_grid_points(self):
        s = Segment.from_function(lambda th: th + 1.0, 1.0, 0.25)
        assert s(-0.6)[0] == pytest.approx(0.4)
        assert s.sup_norm() == 1.0

    @given(st.lists(finite, min_size=5, max_size=5), st.lists(finite, min_size=5, max_size=5))
    def test_sup_norm_triangle_inequality(self, a, b):
        x, y = Segment(1.0, 0.25, a), Segment(1.0, 0.25, b)
        s = Segment(1.0, 0.25, x.values + y.values)
        assert s.sup_norm() <= x.sup_norm() + y.sup_norm() + 1e-12


class TestMeasure:
    def test_dirac_at_zero_applies_matrix(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        nu = SignedMatrixMeasure(1.0, [(0.0, A)])
        seg = Segment.constant([1.0, -1.0], 1.0, 0.125)
        np.testing.assert_allclose(apply_measure(nu, seg), A @ [1.0, -1.0])

    def test_delay_atom_reads_oldest_value(self):
        nu = SignedMatrixMeasure(1.0, [(-1.0, [[-E_INV]])])
        seg = Segment.from_function(lambda th: th + 1.0, 1.0, 0.125)
        assert apply_measure(nu, seg)[0] == 0.0

    def test_constant_density_integrates_to_length(self):
        nu = SignedMatrixMeasure(1.0, density=[(-1.0, 0.0, [[1.0]])])
        seg = Segment.constant([1.0], 1.0, 0.125)
        assert apply_measure(nu, seg)[0] == pytest.approx(1.0, abs=1e-14)

    def test_density_integrates_linear_function_exactly(self):
        # trapezoid rule is exact for piecewise-linear integrands
        nu = SignedMatrixMeasure(1.0, density=[(-1.0, -0.5, [[2.0]])])
        seg = Segment.from_function(lambda th: th, 1.0, 0.125)
        assert apply_measure(nu, seg)[0] == pytest.approx(-0.75, abs=1e-14)

    def test_atom_outside_support(self):
        with pytest.raises(ModelValidationError, match="atom outside support"):
            SignedMatrixMeasure(1.0, [(-2.0, [[1.0]])])

    def test_delay_length_mismatch(self):
        nu = SignedMatrixMeasure(1.0, [(0.0, [[1.0]])])
        with pytest.raises(ModelValidationError):
            apply_measure(nu, Segment.constant([1.0], 2.0, 0.5))

    @pytest.mark.parametrize("atoms,expected", [
        ([(-1.0, [[-E_INV]])], E_INV),
        ([(0.0, np.diag([-2.0, 3.0]))], 3.0),
        ([(0.0, [[0.5]]), (-1.0, [[-0.5]])], 1.0),
    ])
    def test_total_variation_norm(self, atoms, expected):
        assert nu_total_variation_norm(SignedMatrixMeasure(1.0, atoms)) == pytest.approx(expected)

    def test_total_variation_counts_density_mass(self):
        nu = SignedMatrixMeasure(1.0, [(0.0, [[1.0, 0.0], [0.0, 0.0]])],
                                 [(-1.0, -0.5, [[0.0, -2.0], [0.0, 0.0]])])
        assert nu_total_variation_norm(nu) == pytest.approx(math.sqrt(1.0 + 1.0))

    @given(st.floats(-5, 5), st.floats(-3, 3), st.floats(-3, 3))
    def test_total_variation_homogeneous(self, c, a, dval):
        nu = SignedMatrixMeasure(1.0, [(0.0, [[a]]), (-0.5, [[1.0]])],
                                 [(-1.0, -0.25, [[dval]])])
        assert nu_total_variation_norm(nu.scaled(c)) == pytest.approx(
            abs(c) * nu_total_variation_norm(nu), rel=1e-12, abs=1e-12)

    @given(st.lists(finite, min_size=9, max_size=9), st.lists(finite, min_size=9, max_size=9),
           finite, finite, st.floats(-1, 0))
    def test_apply_is_linear(self, x, y, a, b, theta):
        nu = SignedMatrixMeasure(1.0, [(0.0, [[-1.0]]), (theta, [[0.7]])],
                                 [(-1.0, -0.3, [[0.4]])])
        sx, sy = Segment(1.0, 0.125, x), Segment(1.0, 0.125, y)
        lhs = apply_measure(nu, Segment(1.0, 0.125, a * sx.values + b * sy.values))
        rhs = a * apply_measure(nu, sx) + b * apply_measure(nu, sy)
        assert lhs[0] == pytest.approx(rhs[0], abs=1e-10 * (1 + abs(a) + abs(b)) * 10)


class TestModel:
    def test_identity_sigma_is_valid(self):
        assert validate_model(ou(), h=0.25).valid

    def test_singular_sigma(self):
        with pytest.raises(ModelValidationError, match="singular sigma"):
            ou(sigma=0.0)

    def test_grid_misalignment_rejected(self):
        with pytest.raises(ModelValidationError, match="grid misaligned"):
            validate_model(ou(), h=0.3)

    def test_semilinear_split_keeps_drift(self, matrix_measure):
        m = SemiLinearModel(matrix_measure, np.eye(2), TanhDelay([0.1, 0.2]), 0.2)
        seg = np.random.default_rng(1).normal(size=(4, 9, 2))
        np.testing.assert_allclose(m.as_fsde().drift(seg, 0.125), m.drift(seg, 0.125),
                                   atol=1e-13)

    def test_family_constants(self):
        assert LinearDrift([[-2.0]]).one_sided_rate == 2.0
        assert DiscreteDelay([[0.1]]).lipschitz == pytest.approx(0.1)
        assert TanhDelay([0.3, -0.5]).lipschitz == 0.5
        assert ZeroDrift(2)(np.ones((3, 2))).shape == (3, 2)


class TestProbe:
    def test_ou_rate_not_falsified(self):
        rep = probe_dissipativity(ou(), [(2.0, 0.0)], n_pairs=2000, h=0.125, seed=0)
        assert rep.status == "not falsified" and rep.best == (2.0, 0.0)

    def test_pure_delay_feedback_falsifies_small_memory_rate(self):
        m = FsdeModel(1, 1.0, ZeroDrift(1), DiscreteDelay([[1.0]]), [[1.0]])
        rep = probe_dissipativity(m, [(0.0, 1e-3)], n_pairs=2000, h=0.125, seed=0)
        assert rep.witnesses and rep.best is None

    def test_huge_memory_rate_not_falsified(self):
        m = FsdeModel(1, 1.0, ZeroDrift(1), DiscreteDelay([[1.0]]), [[1.0]])
        rep = probe_dissipativity(m, [(0.0, 1e6)], n_pairs=2000, h=0.125, seed=0)
        assert rep.best == (0.0, 1e6)
