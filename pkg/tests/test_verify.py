import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sddekit import spectral, verify
from sddekit.model import (FsdeModel, LinearDrift, LipschitzCert, Segment, SemiLinearModel,
                           ZeroDelay)

from conftest import bundled_model


def ou(sigma=1.0, a=-1.0):
    return FsdeModel(1, 1.0, LinearDrift([[a]]), ZeroDelay(), [[sigma]],
                     lipschitz=LipschitzCert(-a, 0.0))


class TestStatistics:
    @given(st.permutations(list(range(9))))
    def test_kendall_against_pair_count(self, perm):
        x = np.array(perm, dtype=float)
        n = x.size
        s = sum(np.sign(x[j] - x[i]) for i in range(n) for j in range(i + 1, n))
        tau, p = verify.mann_kendall(x)
        assert tau == pytest.approx(s / (n * (n - 1) / 2))
        assert 0 <= p <= 1

    def test_kendall_edge_cases(self):
        assert verify.mann_kendall([3.0, 3.0, 3.0]) == (0.0, 1.0)
        tau, p = verify.mann_kendall(np.arange(10.0))
        assert tau == pytest.approx(1.0) and p < 1e-5

    @given(st.integers(1, 6), st.lists(st.floats(-5, 5), min_size=8, max_size=20))
    def test_trailing_max(self, width, xs):
        x = np.array([xs, xs[::-1]])
        got = verify._trailing_max(x, width)
        for i in range(width - 1, x.shape[1]):
            np.testing.assert_array_equal(got[:, i], x[:, i - width + 1:i + 1].max(axis=1))

    def test_wls_exact_line(self):
        t = np.linspace(0, 3, 7)
        slope, se = verify._wls_slope(t, 2.0 - 0.7 * t, np.full(7, 0.1))
        assert slope == pytest.approx(-0.7, abs=1e-12)
        # no misfit: the stderr is the textbook one for equal errors
        assert se == pytest.approx(0.1 / math.sqrt(np.sum((t - t.mean()) ** 2)))

    def test_wls_matches_polyfit(self):
        rng = np.random.default_rng(0)
        t = np.linspace(0, 2, 9)
        s = rng.uniform(0.05, 0.3, 9)
        y = 1 + t + rng.normal(0, s)
        slope, _ = verify._wls_slope(t, y, s)
        assert slope == pytest.approx(np.polyfit(t, y, 1, w=1 / s)[0], rel=1e-10)


class TestFunctionals:
    def test_values(self):
        h = 0.25
        seg = np.zeros((1, 5, 2))
        seg[0, -1] = [1.0, 2.0]
        seg[0, 2] = [0.5, 0.0]
        v = 1 / math.sqrt(2)
        assert verify.functional("tanh", 1.0, 2)(seg, h)[0] == pytest.approx(1 + math.tanh(3 * v))
        assert verify.functional("cyl_exp", 1.0, 2)(seg, h)[0] == pytest.approx(math.exp(-0.5 * 5.25))
        assert verify.functional("sin", 1.0, 2)(seg, h)[0] == pytest.approx(2 + math.sin(3.5 * v))
        assert verify.functional("linear", 1.0, 2)(seg, h)[0] == pytest.approx(3 * v)
        assert verify.functional("const", 1.0, 2)(seg, h)[0] == 1.0

    def test_unknown(self):
        with pytest.raises(ValueError):
            verify.functional("cosh", 1.0, 1)


class TestMemory:
    def test_exact_while_memory_lasts(self):
        h = 1 / 32
        xi = Segment.from_function(lambda th: math.sin(4 * th), 1.0, h)
        for t in (h, 0.5, 1.0):
            rep = verify.check_memory_passthrough(ou(), np.sin, xi, t, h, 200, seed=1)
            assert rep.passed and rep.estimate == 0.0
            assert rep.details["expected"][0] == pytest.approx(math.sin(math.sin(4 * (t - 1.0))),
                                                               abs=1e-15)

    def test_noise_after_memory(self):
        h = 1 / 32
        xi = Segment.constant([0.0], 1.0, h)
        rep = verify.check_memory_passthrough(ou(), np.sin, xi, 1.0 + h, h, 200)
        assert rep.passed and rep.estimate > 0


class TestContraction:
    def test_certified_model(self):
        m = bundled_model("ou_delay_tanh")
        h = 1 / 32
        xi = Segment.constant([1.0], m.r0, h)
        eta = Segment.constant([-1.0], m.r0, h)
        rep = verify.check_contraction(m, xi, eta, 5.0, h, 200, seed=2)
        assert rep.passed and rep.estimate <= rep.bound

    def test_overclaimed_rate_is_caught(self):
        m = bundled_model("contraction_negative")
        h = 1 / 32
        xi = Segment.constant([1.0], m.r0, h)
        eta = Segment.constant([-1.0], m.r0, h)
        rep = verify.check_contraction(m, xi, eta, 15.0, h, 100)
        assert not rep.passed and rep.details["violating_replicas"] > 0

    def test_uncertified_model_rejected(self):
        m = FsdeModel(1, 1.0, LinearDrift([[-1.0]]), ZeroDelay(), [[1.0]])
        xi = Segment.constant([1.0], 1.0, 0.25)
        with pytest.raises(ValueError):
            verify.check_contraction(m, xi, xi, 1.0, 0.25, 10)


class TestExpMoment:
    def test_stationary_ou_endpoint(self):
        h = 1 / 64
        xi = Segment.constant([0.0], 1.0, h)
        rep = verify.check_exp_moment(ou(), xi, [0.2], [4.0, 5.0, 6.0], h, 20_000, seed=3,
                                      functional_kind="endpoint")
        row = rep.estimate[0]
        # Euler invariant variance 1 / (2 - h); E exp(eps X^2) = (1 - 2 eps v)^{-1/2}
        expect = 1 / math.sqrt(1 - 2 * 0.2 / (2 - h))
        for mean, se in zip(row["mean"], row["stderr"]):
            assert abs(mean - expect) < 4 * se
        assert rep.passed

    def test_deterministic_decay(self):
        h = 1 / 32
        xi = Segment.constant([1.0], 1.0, h)
        rep = verify.check_exp_moment(ou().with_sigma(0.0), xi, [0.1], [1, 2, 3, 4], h, 3)
        assert all(x <= math.exp(0.1) + 1e-12 for x in rep.estimate[0]["mean"])
        assert rep.passed

    def test_unstable_drift_trends_up(self):
        h = 1 / 32
        xi = Segment.constant([0.0], 1.0, h)
        rep = verify.check_exp_moment(ou(a=0.3), xi, [0.01], [1, 2, 3, 4, 5, 6], h, 5000)
        assert not rep.passed


class TestHarnackAndGirsanov:
    def test_harnack_ou(self):
        m = bundled_model("ou")
        h = 1 / 32
        xi = Segment.constant([0.5], 1.0, h)
        eta = Segment.constant([-0.5], 1.0, h)
        f = verify.functional("tanh", 1.0, 1)
        rep = verify.check_harnack(m, f, 2.0, 1.0, xi, eta, h, 4000, seed=1)
        assert rep.passed

    def test_girsanov_identities(self):
        m = bundled_model("ou_delay_tanh")
        h = 1 / 32
        xi = Segment.constant([0.5], 1.0, h)
        eta = Segment.constant([-0.5], 1.0, h)
        rep = verify.check_girsanov_moments(m, xi, eta, 2.0, 1.0, h, 8000, seed=1)
        assert rep.passed, rep.details
        assert rep.details["tau_max"] <= 1.0 + h


class TestInvariant:
    def test_shift_invariance_holds(self):
        m = bundled_model("ou")
        ens = verify.sample_invariant(m, 10.0, 1.0, 1000, 1 / 32, seed=1)
        rep = verify.check_shift_invariance(ens, [-0.2, -0.6, -1.0])
        assert rep.passed

    def test_shift_invariance_negative_control(self):
        m = bundled_model("ou")
        h = 1 / 32
        ens = verify.sample_invariant(m, 0.0, 1.0, 600, h, xi=Segment.constant([5.0], 1.0, h))
        rep = verify.check_shift_invariance(ens, [-1.0])
        assert not rep.passed

    def test_spacing_must_cover_memory(self):
        with pytest.raises(ValueError):
            verify.sample_invariant(ou(), 1.0, 0.5, 10, 0.25)

    def test_endpoint_normal(self):
        h = 1 / 32
        ens = verify.sample_invariant(ou(), 10.0, 1.0, 3000, h, seed=2)
        _, p = verify.ks_endpoint_normal(ens, 1 / (2 - h))
        assert p > 1e-3
        _, p_wrong = verify.ks_endpoint_normal(ens, 2.0)
        assert p_wrong < 1e-6

    def test_pure_delay_variance(self, pure_delay):
        h = 1 / 32
        m = SemiLinearModel(pure_delay, [[1.0]])
        ens = verify.sample_invariant(m, 30.0, 1.0, 8000, h, seed=4)
        g = spectral.gamma_solve(pure_delay, 60.0, h)
        expect = h * float(np.sum(g.values[:-1, 0, 0] ** 2))
        assert ens.segments[:, -1, 0].var() == pytest.approx(expect, rel=0.05)


@pytest.fixture(scope="module")
def ens():
    return verify.sample_invariant(ou(), 10.0, 1.0, 2000, 1 / 32, seed=5)


class TestSemigroup:
    def test_constant_has_zero_variance(self, ens):
        const = verify.functional("const", 1.0, 1)
        rep = verify.check_l2_decay(ou(), ens, const, [0.5, 1.0], 1 / 32, n_inner=4)
        assert rep.details["per_functional"][0]["status"] == "zero variance"
        hb = verify.check_hyperbound(ou(), ens, const, 1.0, 1 / 32, n_inner=4)
        assert hb.passed and hb.estimate[0] == pytest.approx(1.0)

    def test_linear_decay_with_oracle(self, ens):
        lin = verify.functional("linear", 1.0, 1)
        rep = verify.check_l2_decay(ou(), ens, lin, [0.25, 0.5, 0.75, 1.0], 1 / 32, rate=2.0,
                                    ptf_oracle=lambda s, t: s[:, -1, 0] * math.exp(-t))
        assert rep.passed
        assert rep.estimate[0] == pytest.approx(2.0, abs=1e-9)

    def test_nested_estimate_agrees(self, ens):
        lin = verify.functional("linear", 1.0, 1)
        rep = verify.check_l2_decay(ou(), ens, lin, [0.25, 0.5, 0.75, 1.0], 1 / 32, n_inner=50,
                                    rate=1.5)
        assert rep.passed
        assert rep.estimate[0] == pytest.approx(2.0, abs=0.3)

    def test_overclaimed_rate_fails(self, ens):
        lin = verify.functional("linear", 1.0, 1)
        rep = verify.check_l2_decay(ou(), ens, lin, [0.25, 0.5, 0.75, 1.0], 1 / 32, rate=4.0,
                                    ptf_oracle=lambda s, t: s[:, -1, 0] * math.exp(-t))
        assert not rep.passed

    def test_hyperbound(self, ens):
        fs = [verify.functional(k, 1.0, 1) for k in ("tanh", "cyl_exp")]
        rep = verify.check_hyperbound(ou(), ens, fs, 1.0, 1 / 32, n_inner=50)
        assert rep.passed


class TestCouplingChecks:
    def test_restart(self):
        m = bundled_model("ou")
        xi = Segment.constant([1.0], 1.0, 1 / 32)
        rep = verify.check_restart_coupling(m, xi, 2.0, 4.0, 1 / 32, 500)
        assert rep.passed

    def test_restart_argument_order(self):
        xi = Segment.constant([1.0], 1.0, 0.25)
        with pytest.raises(ValueError):
            verify.check_restart_coupling(bundled_model("ou"), xi, 3.0, 2.0, 0.25, 10)

    def test_tv_bound_decays(self):
        m = bundled_model("ou_delay_tanh")
        h = 1 / 32
        xi = Segment.constant([1.0], 1.0, h)
        eta = Segment.constant([-1.0], 1.0, h)
        rep = verify.tv_bound_estimate(m, xi, eta, [0, 0.5, 1, 1.5, 2], 2.0, 1.0, h, 4000)
        tv = rep.curves["tv_bound"]
        assert tv[-1] < tv[0]
        assert rep.passed, rep.details
