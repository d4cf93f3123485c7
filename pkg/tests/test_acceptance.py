"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary.
"""

import math
import re
import time
from contextlib import contextmanager

import numpy as np
import pytest
from click.testing import CliRunner
from scipy.linalg import expm

from sddekit import certify, spectral, verify
from sddekit.cli import main
from sddekit.config import (build_model, bundled_config, bundled_names, initial_segment,
                            linear_split, load_config)
from sddekit.model import Segment, SignedMatrixMeasure

pytestmark = pytest.mark.acceptance

RESULTS: list[str] = []

MEASURE_BUNDLES = ("example_cor14", "delay_linear", "matrix_delay")


@contextmanager
def criterion(number, title, budget_s):
    """Time the block, record a PASS/FAIL line and fail on the time budget too."""
    start = time.perf_counter()
    info = {}
    ok = False
    try:
        yield info
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        in_time = elapsed < budget_s
        tag = "PASS" if ok and in_time else "FAIL"
        extra = f" | {info['detail']}" if "detail" in info else ""
        line = f"[{tag}] criterion {number:>2}: {title} ({elapsed:.1f}s / {budget_s:g}s){extra}"
        RESULTS.append(line)
        print(line)
    assert in_time, line


def cfg_of(name):
    return load_config(bundled_config(name))


def measure_of(name):
    return linear_split(cfg_of(name))[0]


def test_01_worked_delay_example():
    with criterion(1, "pure-delay abscissa and rate", 5) as info:
        nu = measure_of("example_cor14")
        root = spectral.lambda0(nu)
        assert abs(root.lambda0 + 1.0) < 1e-6
        ks = certify.k_grid(root.lambda0)
        gap = 1.0 - ks[-1]
        cert = certify.rate_thm13(root.lambda0, 0.0, 1.0, lambda k: np.ones_like(k), ks)
        assert cert.applicable and 1.0 - gap - 1e-12 <= cert.lam < 1.0
        info["detail"] = f"lambda0={root.lambda0:.10f}, rate={cert.lam:.6f}, grid gap={gap:.2e}"


def _grid_oracle(k1, r0):
    """Two-stage grid scan of (2 k1 s - s^2) e^{-r0 (2 k1 - s)} on (0, 2 k1)."""
    def f(s):
        return (2 * k1 * s - s * s) * np.exp(-r0 * (2 * k1 - s))

    s = np.linspace(0, 2 * k1, 200_001)[1:-1]
    j = int(np.argmax(f(s)))
    ds = s[1] - s[0]
    fine = np.linspace(s[max(j - 1, 0)], s[min(j + 1, s.size - 1)], 200_001)
    v = f(fine)
    return float(v.max()), float(fine[np.argmax(v)]), 2 * ds / 200_000


def test_02_lipschitz_closed_forms():
    with criterion(2, "closed-form RHS and maximizer vs grid scan", 10) as info:
        rng = np.random.default_rng(2024)
        worst_rel, worst_arg = 0.0, 0.0
        for k1, r0 in rng.uniform(1e-3, 5.0, size=(100, 2)):
            val, arg, _ = _grid_oracle(k1, r0)
            worst_rel = max(worst_rel, abs(certify.cor12_rhs(k1, r0) - val) / val)
            worst_arg = max(worst_arg, abs(certify.cor12_s0(k1, r0) - arg))
        assert worst_rel <= 1e-6 and worst_arg <= 1e-4
        info["detail"] = f"max rel err {worst_rel:.1e}, max argmax err {worst_arg:.1e}"


def test_03_gamma_cross_validation():
    with criterion(3, "fundamental solution: Euler vs Laplace inversion", 30) as info:
        h = 2.0**-12
        worst = 0.0
        for name in MEASURE_BUNDLES:
            nu = measure_of(name)
            lam0 = spectral.lambda0(nu).lambda0
            table = spectral.gamma_solve(nu, 3.0, h)
            for t in (0.5, 1.0, 1.5, 2.0, 3.0):
                inv = spectral.gamma_fourier(nu, lam0 / 2, t, lambda0_value=lam0)
                worst = max(worst, float(np.max(np.abs(inv - table.at(t)))))
        assert worst < 1e-3
        A = np.array([[-1.0, 0.5], [0.2, -2.0]])
        hd = 2.0**-8
        g = spectral.gamma_solve(SignedMatrixMeasure(1.0, [(0.0, A)]), 3.0, hd)
        dirac = max(np.max(np.abs(g.at(t) - expm(A * t))) for t in (0.5, 1.0, 2.0, 3.0))
        assert dirac <= 5 * hd
        hp = 2.0**-8
        g2 = spectral.gamma_solve(measure_of("example_cor14"), 2.0, hp).at(2.0)[0, 0]
        assert abs(g2 - (1 - math.exp(-1))) <= 2 * hp
        info["detail"] = (f"max |solve - inverse| {worst:.1e}; Dirac err {dirac:.1e} (<= {5 * hd:.1e}); "
                          f"Gamma(2)={g2:.6f}")


def test_04_explicit_bound():
    with criterion(4, "explicit bound dominates the fundamental solution", 30) as info:
        for name in MEASURE_BUNDLES + ("ou",):
            nu = measure_of(name)
            lam0 = spectral.lambda0(nu).lambda0
            pb = spectral.pp_bound(nu, lam0 / 2, lambda0_value=lam0)
            g = spectral.gamma_solve(nu, 10.0, 2.0**-8)
            t = g.times[g.times >= 0]
            assert np.all(g.norms()[g.m:] <= pb.bound * np.exp(pb.lam * t))
        pb = spectral.pp_bound(measure_of("ou"), -0.5, lambda0_value=-1.0)
        closed = 3 * math.pi + 4 * (1 + math.exp(0.5)) / (2 * math.exp(0.5))
        assert pb.rho_lambda == 0.0
        assert abs(pb.bound - closed) <= 1e-6
        info["detail"] = f"scalar bound {pb.bound:.9f} vs {closed:.9f}, rho={pb.rho_lambda}"


def test_05_pathwise_contraction():
    with criterion(5, "pathwise contraction and inflated-rate control", 120) as info:
        h = 2.0**-10
        ratios = []
        for name in ("ou_delay_tanh", "delay_linear"):
            cfg = cfg_of(name)
            m = build_model(cfg)
            xi, eta = initial_segment(cfg, "xi", h), initial_segment(cfg, "eta", h)
            rep = verify.check_contraction(m, xi, eta, 15.0, h, 1000, seed=5)
            assert rep.passed and rep.details["violating_replicas"] == 0
            ratios.append(rep.estimate)
        # with lambda2 = 0.01 the claimed rate grows with lambda1 up to ln(100) - 1
        neg = verify.check_contraction(m, xi, eta, 15.0, h, 1000, seed=5, lambda1=6.0,
                                       lambda2=m.dissipativity.lambda2)
        assert len(neg.details["witnesses"]) >= 1
        info["detail"] = (f"worst ratios {ratios[0]:.3f}, {ratios[1]:.3f} <= slack {rep.bound:.4f}; "
                          f"control: {neg.details['violating_replicas']} violating replicas")


def test_06_coupling_by_change_of_measure():
    with criterion(6, "coupling time, envelope, weight moments (n=1e5, p=2)", 300) as info:
        cfg = cfg_of("ou_delay_tanh")
        m = build_model(cfg)
        h = 2.0**-6
        xi, eta = initial_segment(cfg, "xi", h), initial_segment(cfg, "eta", h)
        rep = verify.check_girsanov_moments(m, xi, eta, 2.0, 1.0, h, 100_000, seed=6)
        d = rep.details
        assert d["tau_ok"] and d["cd3_ok"] and d["mean_R_ok"] and d["moment_ok"]
        info["detail"] = (f"tau_max={d['tau_max']:.4f}, E R={d['mean_R']['mean']:.4f}"
                          f"+-{d['mean_R']['stderr']:.4f}, E R^2={rep.estimate:.3f} "
                          f"<= {rep.bound:.3f}")


def test_07_harnack():
    with criterion(7, "Harnack inequality by simulation, 3 functionals x p in {2, 4}", 600) as info:
        cfg = cfg_of("ou_delay_tanh")
        m = build_model(cfg)
        h = 2.0**-6
        xi, eta = initial_segment(cfg, "xi", h), initial_segment(cfg, "eta", h)
        fs = [verify.functional(k, m.r0, m.d) for k in ("tanh", "cyl_exp", "sin")]
        margins = []
        for p in (2.0, 4.0):
            rep = verify.check_harnack(m, fs, p, 1.0, xi, eta, h, 100_000, seed=7)
            assert rep.passed, rep.details
            margins += [(r["rhs"] - r["lhs"]) / r["sigma"] for r in rep.details["per_functional"]]
        info["detail"] = f"min (RHS - LHS)/sigma = {min(margins):.1f}"


def test_08_memory_passthrough():
    with criterion(8, "memory pass-through is exact on every bundled model", 60) as info:
        count = 0
        for name in bundled_names():
            cfg = cfg_of(name)
            m = build_model(cfg)
            h = m.r0 / 64
            xi = Segment.from_function(lambda th: np.cos(3 * th + np.arange(m.d)), m.r0, h)

            def g(x):
                return np.sin(x).sum(-1) + 0.5 * x[..., 0] ** 2

            for t in (h, m.r0 / 2, m.r0):
                rep = verify.check_memory_passthrough(m, g, xi, t, h, 1000, seed=8)
                assert rep.passed and rep.details["bit_exact"] and rep.estimate == 0.0
                count += 1
            rep = verify.check_memory_passthrough(m, g, xi, m.r0 + h, h, 1000, seed=8)
            assert rep.passed and rep.estimate > 0
            count += 1
        info["detail"] = f"{count} cases on {len(bundled_names())} models"


def test_09_stationarity():
    with criterion(9, "stationary marginals and shift invariance", 300) as info:
        h = 2.0**-8
        ou = build_model(cfg_of("ou"))
        ens = verify.sample_invariant(ou, 20.0, 1.0, 10_000, h, seed=9)
        _, p_ou = verify.ks_endpoint_normal(ens, 0.5)
        assert p_ou > 0.01
        lin = build_model(cfg_of("delay_linear"))
        ens2 = verify.sample_invariant(lin, 20.0, 1.0, 10_000, 2.0**-6, seed=9)
        rep = verify.check_shift_invariance(ens2, [-0.2, -0.4, -0.6, -0.8, -1.0])
        assert rep.passed
        far = Segment.constant([5.0], 1.0, 2.0**-6)
        ens3 = verify.sample_invariant(lin, 0.0, 1.0, 2000, 2.0**-6, seed=9, xi=far)
        neg = verify.check_shift_invariance(ens3, [-0.2, -0.4, -0.6, -0.8, -1.0])
        assert not neg.passed
        info["detail"] = (f"OU KS p={p_ou:.3f}; shift min p={rep.estimate:.3f} > {rep.bound:.4f}; "
                          f"control min p={neg.estimate:.1e}")


def test_10_l2_decay_and_hyperbound():
    with criterion(10, "variance decay rate and fourth-moment bound", 600) as info:
        m = build_model(cfg_of("ou"))
        rate, _ = verify.certified_rate(m)
        h = 2.0**-8
        ens = verify.sample_invariant(m, 20.0, 1.0, 10_000, h, seed=10)
        lin = verify.functional("linear", 1.0, 1)

        def oracle(segs, t):
            return segs[:, -1, 0] * math.exp(-t)

        rep = verify.check_l2_decay(m, ens, lin, [0.25, 0.5, 0.75, 1.0], h, rate=rate,
                                    ptf_oracle=oracle)
        assert rep.passed and rep.status == "pass"
        hb = verify.check_hyperbound(m, ens, lin, 1.0, h, ptf_oracle=oracle)
        assert hb.passed
        row = rep.details["per_functional"][0]
        info["detail"] = (f"fitted {row['fitted_rate']:.4f} +- {row['fit_stderr']:.1e} vs "
                          f"certified {rate:.4f}; hyperbound {hb.estimate[0]:.4f} <= {hb.bound[0]:.4f}")


def _strip_time(text):
    return re.sub(r'"timestamp": "[^"]*"', '"timestamp": ""', text)


def test_11_determinism(tmp_path):
    with criterion(11, "byte-identical reports on re-run", 600) as info:
        runner = CliRunner()
        compared = 0
        for cmd in ("certify", "spectral", "simulate", "verify", "report"):
            dirs = [tmp_path / cmd / s for s in "ab"]
            for d in dirs:
                r = runner.invoke(main, [cmd, "--config", "ou_delay_tanh", "--budget", "smoke",
                                         "--seed", "123", "--out", str(d)])
                assert r.exit_code in (0, 1), r.output
            names = sorted(p.name for p in dirs[0].iterdir())
            assert names == sorted(p.name for p in dirs[1].iterdir())
            for name in names:
                a, b = ((d / name).read_text() for d in dirs)
                assert _strip_time(a) == _strip_time(b), f"{cmd}: {name}"
                compared += 1
        info["detail"] = f"{compared} files compared"
