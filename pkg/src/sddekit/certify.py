"""Explicit ergodicity-rate certificates and the Harnack exponent.

Four certificates are evaluated:

``Thm1.1``
    ``lambda = sup_{s in [0, lambda1]} (s - lambda2 e^{r0 s})`` from the
    segment dissipativity rates.
``Cor1.2``
    closed form in terms of the one-sided rate ``k1`` of ``Z`` and the
    Lipschitz constant ``k2`` of ``b``.
``Thm1.3``
    ``lambda = sup_{k in (0, -lambda0)} (k - c_k k2 e^{k r0})`` for the
    semi-linear model, with ``c_k`` from the fundamental solution.
``Cor1.4``
    the special cases ``b = 0`` and ``nu = A delta_0`` with ``A`` symmetric.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "RateCert",
    "HarnackParams",
    "rate_thm11",
    "check_cor12",
    "cor12_rhs",
    "cor12_s0",
    "rate_thm13",
    "rate_cor14",
    "harnack_exponent",
    "nw2_exponent",
    "best_harnack_exponent",
    "coupling_rate_factor",
    "coupling_memory_factor",
]

_SERIES_SWITCH = 1e-4


@dataclass
class RateCert:
    """One rate certificate, tagged by the result it evaluates.

    ``lam > 0`` iff ``applicable``.  ``optimizer`` is the maximizing ``s``
    (Thm1.1 / Cor1.2) or ``k`` (Thm1.3 / Cor1.4).
    """

    theorem: str
    applicable: bool
    lam: float
    optimizer: float | None
    inputs: dict = field(default_factory=dict)
    ck_source: str | None = None
    margin: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out


@dataclass(frozen=True)
class HarnackParams:
    p: float
    delta: float
    t: float

    def __post_init__(self):
        if not self.p > 1:
            raise ValueError(f"p must exceed 1, got {self.p}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not self.t > 0:
            raise ValueError(f"t must be positive, got {self.t}")


# ---------------------------------------------------------------------------
# Rate from segment dissipativity
# ---------------------------------------------------------------------------


def _thm11_objective(s, lambda2, r0):
    return s - lambda2 * np.exp(r0 * s)


def rate_thm11(lambda1: float, lambda2: float, r0: float) -> RateCert:
    """Maximize ``s - lambda2 e^{r0 s}`` over ``s in [0, lambda1]``.

    The objective is concave, so the maximizer is its stationary point
    ``ln(1 / (lambda2 r0)) / r0`` clamped to ``[0, lambda1]``.
    """
    if lambda1 < 0 or lambda2 < 0 or not r0 > 0:
        raise ValueError("need lambda1, lambda2 >= 0 and r0 > 0")
    if lambda2 == 0:
        s_star = float(lambda1)
    else:
        s_star = min(max(-(math.log(lambda2) + math.log(r0)) / r0, 0.0), float(lambda1))
    lam = float(_thm11_objective(s_star, lambda2, r0))
    return RateCert("Thm1.1", lam > 0, lam, s_star,
                    inputs={"lambda1": lambda1, "lambda2": lambda2, "r0": r0})


# ---------------------------------------------------------------------------
# Rate from the Lipschitz constants
# ---------------------------------------------------------------------------


def _q_minus_1(k1: float, r0: float) -> float:
    # sqrt(x^2 + 1) - 1 without cancellation
    x = k1 * r0
    return x * x / (math.sqrt(x * x + 1.0) + 1.0)


def cor12_rhs(k1: float, r0: float) -> float:
    """Largest admissible ``k2^2``: ``max_s (2 k1 s - s^2) e^{-r0 (2 k1 - s)}``."""
    qm1 = _q_minus_1(k1, r0)
    return 2.0 * qm1 / r0**2 * math.exp(qm1 - k1 * r0)


def cor12_s0(k1: float, r0: float) -> float:
    """Maximizer of ``(2 k1 s - s^2) e^{-r0 (2 k1 - s)}`` on ``(0, 2 k1)``."""
    return (k1 * r0 + _q_minus_1(k1, r0)) / r0


def _cor12_objective(s, k1, r0):
    return (2 * k1 * s - s * s) * np.exp(-r0 * (2 * k1 - s))


def check_cor12(k1: float, k2: float, r0: float) -> RateCert:
    """Applicability and rate of the closed-form ``(k1, k2)`` certificate.

    ``margin = RHS - k2^2``; applicable iff ``margin > 0`` (at equality the
    rate is exactly zero).
    """
    if not k1 > 0 or k2 < 0 or not r0 > 0:
        return RateCert("Cor1.2", False, 0.0, None,
                        inputs={"k1": k1, "k2": k2, "r0": r0},
                        note="requires k1 > 0, k2 >= 0, r0 > 0")
    qm1 = _q_minus_1(k1, r0)
    rhs = cor12_rhs(k1, r0)
    s0 = cor12_s0(k1, r0)
    # s0 is a stationary point of the (log-concave) objective
    eps = 1e-6 * max(s0, 1e-12)
    lo, mid, hi = _cor12_objective(np.array([s0 - eps, s0, s0 + eps]), k1, r0)
    if not (mid >= lo - 1e-12 * abs(mid) and mid >= hi - 1e-12 * abs(mid)):
        raise ArithmeticError("s0 is not a local maximizer of the (k1, k2) objective")
    margin = rhs - k2 * k2
    lam = r0 / (k1 * r0 + qm1) * (
        2.0 * qm1 / r0**2 - k2 * k2 * math.exp(k1 * r0 - qm1))
    applicable = margin > 0
    return RateCert("Cor1.2", applicable, float(lam) if applicable else float(min(lam, 0.0)),
                    s0, inputs={"k1": k1, "k2": k2, "r0": r0,
                                "lambda1": 2 * k1 - s0, "lambda2": k2 * k2 / s0},
                    margin=float(margin))


# ---------------------------------------------------------------------------
# Rates for the semi-linear model
# ---------------------------------------------------------------------------


def k_grid(lambda0: float, n: int = 512, lo_frac: float = 1e-4) -> np.ndarray:
    """Log-uniform grid on ``(0, -lambda0)``; the top point sits one cell below."""
    top = -lambda0
    logs = np.linspace(math.log(lo_frac), 0.0, n + 1)[:-1]
    # shift so the last point is one log-cell short of -lambda0
    return top * np.exp(logs + (logs[1] - logs[0]) * 0.5)


def rate_thm13(lambda0: float, k2: float, r0: float,
               ck_provider: Callable[[np.ndarray], np.ndarray],
               k_values: np.ndarray | None = None, ck_source: str = "empirical",
               refine: bool = True) -> RateCert:
    """Grid maximization of ``k - c_k k2 e^{k r0}`` over ``k in (0, -lambda0)``.

    Parameters
    ----------
    ck_provider : callable
        Maps an array of ``k`` to the matching ``c_k`` values.
    k_values : array, optional
        The search grid; defaults to :func:`k_grid`.
    """
    inputs = {"lambda0": lambda0, "k2": k2, "r0": r0}
    if lambda0 >= 0:
        return RateCert("Thm1.3", False, 0.0, None, inputs=inputs, ck_source=ck_source,
                        note="lambda0 >= 0: no stable linear part")
    ks = k_grid(lambda0) if k_values is None else np.asarray(k_values, dtype=float)
    if k2 == 0:
        k_best = float(ks.max())
        return RateCert("Thm1.3", k_best > 0, k_best, k_best, inputs=inputs,
                        ck_source=ck_source, note="k2 = 0: any rate below -lambda0")
    ck = np.asarray(ck_provider(ks), dtype=float)
    obj = ks - ck * k2 * np.exp(ks * r0)
    i = int(np.argmax(obj))
    k_best, best = float(ks[i]), float(obj[i])
    if refine and len(ks) > 2:
        lo = ks[max(i - 1, 0)]
        hi = ks[min(i + 1, len(ks) - 1)]
        fine = np.linspace(lo, hi, 65)
        fine = fine[(fine > 0) & (fine < -lambda0)]
        if fine.size:
            ck_f = np.asarray(ck_provider(fine), dtype=float)
            obj_f = fine - ck_f * k2 * np.exp(fine * r0)
            j = int(np.argmax(obj_f))
            if obj_f[j] > best:
                k_best, best = float(fine[j]), float(obj_f[j])
    inputs["ck_at_optimizer"] = float(np.asarray(ck_provider(np.array([k_best])))[0])
    return RateCert("Thm1.3", best > 0, best, k_best, inputs=inputs, ck_source=ck_source)


def rate_cor14(lambda0: float, k2: float, r0: float, *, b_zero: bool,
               symmetric_dirac: bool, n: int = 512) -> RateCert:
    """The two special cases where ``c_k`` is known.

    ``b_zero``: every rate in ``(0, -lambda0)`` holds; reported as the top
    grid point.  ``symmetric_dirac``: ``c_k = 1`` on ``(0, -lambda0]``.
    """
    inputs = {"lambda0": lambda0, "k2": k2, "r0": r0}
    if lambda0 >= 0:
        return RateCert("Cor1.4", False, 0.0, None, inputs=inputs,
                        note="lambda0 >= 0: no stable linear part")
    if b_zero or k2 == 0:
        k_best = float(k_grid(lambda0, n).max())
        return RateCert("Cor1.4", True, k_best, k_best, inputs=inputs, ck_source="none",
                        note="b = 0: every rate in (0, -lambda0)")
    if symmetric_dirac:
        ks = np.linspace(-lambda0 / n, -lambda0, n)
        obj = ks - k2 * np.exp(ks * r0)
        i = int(np.argmax(obj))
        # the objective is concave: the stationary point is exact when interior
        k_stat = math.log(1.0 / (k2 * r0)) / r0 if k2 > 0 else -lambda0
        if 0 < k_stat < -lambda0:
            k_best = k_stat
        else:
            k_best = float(ks[i]) if k_stat > 0 else float(ks[0])
        lam = k_best - k2 * math.exp(k_best * r0)
        return RateCert("Cor1.4", lam > 0, float(lam), float(k_best), inputs=inputs,
                        ck_source="exact (c_k = 1)",
                        note="nu = A delta_0 with A symmetric")
    return RateCert("Cor1.4", False, 0.0, None, inputs=inputs,
                    note="neither b = 0 nor nu = A delta_0 with A symmetric")


# ---------------------------------------------------------------------------
# Harnack exponent
# ---------------------------------------------------------------------------


def _sinh_minus_id(x: float) -> float:
    """``sinh(x) - x`` without cancellation."""
    if abs(x) < 0.5:
        x2 = x * x
        term, total, k = x * x2 / 6.0, 0.0, 3
        while abs(term) > 1e-18 * abs(x * x2):
            total += term
            term *= x2 / ((k + 1) * (k + 2))
            k += 2
        return total
    return math.sinh(x) - x


def coupling_rate_factor(k1: float, t: float) -> float:
    """``2 k1 / (e^{2 k1 t} - 1)``, with limit ``1 / t`` at ``k1 = 0``."""
    if t <= 0:
        raise ValueError("t must be positive")
    x = 2.0 * k1 * t
    if abs(k1 * t) < _SERIES_SWITCH:
        return (1.0 - x / 2.0 + x * x / 12.0) / t
    return 2.0 * k1 / math.expm1(x)


def coupling_memory_factor(k1: float, t: float) -> float:
    """``(e^{4 k1 t} - 1 - 4 k1 t e^{2 k1 t}) / (2 k1 (e^{2 k1 t} - 1)^2)``.

    Equals ``t/3`` at ``k1 = 0``; even in ``k1 t``.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    x = abs(2.0 * k1 * t)
    if abs(k1 * t) < _SERIES_SWITCH:
        return t / 3.0 * (1.0 - x * x / 30.0)
    # numerator = 2 e^x (sinh x - x); divide through by e^{2x} for large x
    if x > 30.0:
        num = 1.0 - math.exp(-2 * x) - 2 * x * math.exp(-x)
        den = x * (-math.expm1(-x)) ** 2
        return t * num / den
    return t * 2.0 * math.exp(x) * _sinh_minus_id(x) / (x * math.expm1(x) ** 2)


def _displacements(xi, eta) -> tuple[float, float]:
    xv = np.asarray(getattr(xi, "values", xi), dtype=float)
    ev = np.asarray(getattr(eta, "values", eta), dtype=float)
    if xv.ndim == 1:
        xv, ev = xv[:, None], ev[:, None]
    diff = xv - ev
    delta0 = float(np.linalg.norm(diff[-1]))
    sup = float(np.max(np.linalg.norm(diff, axis=1)))
    return delta0, sup


def _brace(k1, k2, delta, t, r0, d0, dsup):
    return (coupling_rate_factor(k1, t) * d0 * d0
            + k2 * k2 / delta * (r0 * dsup * dsup + d0 * d0 * coupling_memory_factor(k1, t)))


def harnack_exponent(hp: HarnackParams, k1: float, k2: float, sigma_inv_norm: float,
                     xi, eta, r0: float) -> float:
    """Exponent of the dimension-free Harnack inequality at horizon ``t + r0``.

    ``xi`` and ``eta`` are segments (or ``(m + 1, d)`` arrays) on a common grid.
    """
    d0, dsup = _displacements(xi, eta)
    pref = hp.p**2 * sigma_inv_norm**2 * (1 + hp.delta) / (2 * (hp.p - 1))
    return float(pref * _brace(k1, k2, hp.delta, hp.t, r0, d0, dsup))


def nw2_exponent(hp: HarnackParams, k1: float, k2: float, sigma_inv_norm: float,
                 xi, eta, r0: float) -> float:
    """Log of the closed-form bound on ``E R^{p/(p-1)}`` for the coupling weight.

    Raising the bound to the power ``p - 1`` gives the Harnack exponent.
    """
    d0, dsup = _displacements(xi, eta)
    pref = hp.p**2 * sigma_inv_norm**2 * (1 + hp.delta) / (2 * (hp.p - 1) ** 2)
    return float(pref * _brace(k1, k2, hp.delta, hp.t, r0, d0, dsup))


def best_harnack_exponent(p: float, t: float, k1: float, k2: float, sigma_inv_norm: float,
                          xi, eta, r0: float, log_bounds=(-20.0, 20.0),
                          xtol: float = 1e-10) -> tuple[float, float]:
    """Minimize the Harnack exponent over ``delta`` by golden-section search on ``log delta``."""
    def f(logd):
        return harnack_exponent(HarnackParams(p, math.exp(logd), t), k1, k2,
                                sigma_inv_norm, xi, eta, r0)

    a, b = log_bounds
    invphi = (math.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > xtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    cands = [(f(log_bounds[0]), log_bounds[0]), (f(log_bounds[1]), log_bounds[1]),
             (f(0.5 * (a + b)), 0.5 * (a + b))]
    val, logd = min(cands)
    return math.exp(logd), val
