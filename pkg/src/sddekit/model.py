"""Domain types for delay SDE models.

A model's state is a *segment*: a path on ``[-r0, 0]`` sampled on a uniform
grid of step ``h`` and read between grid points by linear interpolation.
Everything that evaluates a drift works on batches of segments, stored as
arrays of shape ``(n, m + 1, d)`` with ``m = r0 / h``; index ``0`` holds the
oldest value ``xi(-r0)`` and index ``-1`` the present value ``xi(0)``.

Drift callables follow two conventions:

* ``Z(x)`` maps a batch of points ``(n, d)`` to ``(n, d)``.
* ``b(seg, h)`` maps a batch of segments ``(n, m + 1, d)`` to ``(n, d)``.

Both must be pure functions.  :func:`pointwise` adapts a plain
``Segment -> R^d`` function to the batched form.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ModelValidationError",
    "Segment",
    "SignedMatrixMeasure",
    "DissipativityCert",
    "LipschitzCert",
    "FsdeModel",
    "SemiLinearModel",
    "ValidationReport",
    "ProbeReport",
    "LinearDrift",
    "ZeroDrift",
    "ZeroDelay",
    "DiscreteDelay",
    "DistributedDelay",
    "TanhDelay",
    "SumDelay",
    "pointwise",
    "validate_model",
    "apply_measure",
    "nu_total_variation_norm",
    "probe_dissipativity",
    "grid_steps",
]

# Relative tolerance used when checking that h divides r0.
_GRID_RTOL = 1e-9


class ModelValidationError(ValueError):
    """Raised when a model or one of its parts violates a structural invariant."""


def grid_steps(r0: float, h: float) -> int:
    """Return ``m = r0 / h`` after checking that it is a positive integer."""
    if not (r0 > 0 and h > 0):
        raise ModelValidationError(f"r0 and h must be positive (got r0={r0}, h={h})")
    m = round(r0 / h)
    if m < 1 or abs(m * h - r0) > _GRID_RTOL * r0:
        raise ModelValidationError(
            f"grid misaligned: h={h} does not divide r0={r0}")
    return int(m)


def _as_matrix(a, d: int | None = None) -> np.ndarray:
    """Coerce scalars, flat row-major lists or nested lists to a square matrix."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim == 0:
        k = 1 if d is None else d
        return arr * np.eye(k)
    if arr.ndim == 1:
        k = int(round(math.sqrt(arr.size)))
        if k * k != arr.size:
            raise ModelValidationError(f"cannot reshape {arr.size} entries to a square matrix")
        arr = arr.reshape(k, k)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ModelValidationError(f"expected a square matrix, got shape {arr.shape}")
    if d is not None and arr.shape[0] != d:
        raise ModelValidationError(f"expected a {d}x{d} matrix, got {arr.shape}")
    return arr


def _interp_position(theta: float, r0: float, h: float, m: int) -> tuple[int, float]:
    """Grid cell index and weight for reading a segment at ``theta``."""
    pos = (theta + r0) / h
    j = int(math.floor(pos + 1e-9))
    j = min(max(j, 0), m)
    w = pos - j
    if abs(w) < 1e-9:
        w = 0.0
    if j == m:
        w = 0.0
    return j, w


def _read(values: np.ndarray, j: int, w: float) -> np.ndarray:
    """Linear interpolation between grid points ``j`` and ``j + 1`` along axis -2."""
    if w == 0.0:
        return values[..., j, :]
    return (1.0 - w) * values[..., j, :] + w * values[..., j + 1, :]


# ---------------------------------------------------------------------------
# Segment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """A path on ``[-r0, 0]`` known at the grid points ``-r0 + j*h``.

    Parameters
    ----------
    r0 : float
        Delay length.
    h : float
        Grid step; ``r0 / h`` must be a positive integer.
    values : array_like, shape (m + 1, d)
        Values at the grid points, oldest first.
    """

    r0: float
    h: float
    values: np.ndarray

    def __post_init__(self):
        m = grid_steps(self.r0, self.h)
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != m + 1:
            raise ModelValidationError(
                f"segment needs {m + 1} grid values, got array of shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ModelValidationError("segment values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, x, r0: float, h: float) -> "Segment":
        m = grid_steps(r0, h)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return cls(r0, h, np.tile(x, (m + 1, 1)))

    @classmethod
    def from_function(cls, fn: Callable[[float], Sequence[float]], r0: float,
                      h: float) -> "Segment":
        m = grid_steps(r0, h)
        thetas = -r0 + h * np.arange(m + 1)
        return cls(r0, h, np.array([np.atleast_1d(fn(th)) for th in thetas], dtype=float))

    @property
    def m(self) -> int:
        return self.values.shape[0] - 1

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def thetas(self) -> np.ndarray:
        return -self.r0 + self.h * np.arange(self.m + 1)

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.values, axis=1)))

    def __call__(self, theta: float) -> np.ndarray:
        if not (-self.r0 - 1e-12 <= theta <= 1e-12):
            raise ValueError(f"theta={theta} outside [-{self.r0}, 0]")
        j, w = _interp_position(theta, self.r0, self.h, self.m)
        return _read(self.values, j, w)

    def __sub__(self, other: "Segment") -> "Segment":
        return Segment(self.r0, self.h, self.values - other.values)


# ---------------------------------------------------------------------------
# Signed matrix measure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignedMatrixMeasure:
    """A ``d x d`` matrix-valued finite signed measure on ``[-r0, 0]``.

    The measure is a finite sum of atoms ``A * delta_theta`` plus a
    piecewise-constant matrix density given as ``(start, stop, M)`` pieces.

    Parameters
    ----------
    r0 : float
        Support is ``[-r0, 0]``.
    atoms : sequence of (theta, A)
        Point masses.
    density : sequence of (start, stop, M)
        Density equal to ``M`` on ``[start, stop)``; pieces may overlap and add.
    """

    r0: float
    atoms: tuple = ()
    density: tuple = ()
    _weights_cache: dict = field(default_factory=dict, init=False, repr=False,
                                 compare=False, hash=False)

    def __post_init__(self):
        if not self.r0 > 0:
            raise ModelValidationError(f"r0 must be positive, got {self.r0}")
        atoms = []
        d = None
        for theta, a in self.atoms:
            theta = float(theta)
            if not (-self.r0 - 1e-12 <= theta <= 1e-12):
                raise ModelValidationError(
                    f"atom outside support: theta={theta} not in [-{self.r0}, 0]")
            mat = _as_matrix(a, d)
            d = mat.shape[0]
            atoms.append((min(max(theta, -self.r0), 0.0), mat))
        pieces = []
        for start, stop, val in self.density:
            start, stop = float(start), float(stop)
            if not (-self.r0 - 1e-12 <= start < stop <= 1e-12):
                raise ModelValidationError(
                    f"density piece [{start}, {stop}) outside support [-{self.r0}, 0]")
            mat = _as_matrix(val, d)
            d = mat.shape[0]
            pieces.append((max(start, -self.r0), min(stop, 0.0), mat))
        for _, mat in atoms:
            if not np.all(np.isfinite(mat)):
                raise ModelValidationError("measure entries must be finite")
        for _, _, mat in pieces:
            if not np.all(np.isfinite(mat)):
                raise ModelValidationError("measure entries must be finite")
        object.__setattr__(self, "atoms", tuple(atoms))
        object.__setattr__(self, "density", tuple(pieces))

    @classmethod
    def zero(cls, d: int, r0: float) -> "SignedMatrixMeasure":
        return cls(r0, atoms=((0.0, np.zeros((d, d))),))

    @property
    def d(self) -> int:
        if self.atoms:
            return self.atoms[0][1].shape[0]
        if self.density:
            return self.density[0][2].shape[0]
        raise ModelValidationError("empty measure has no dimension; use SignedMatrixMeasure.zero")

    @property
    def reach(self) -> float:
        """Largest ``|theta|`` carrying mass; 0 for measures concentrated at 0."""
        r = 0.0
        for theta, a in self.atoms:
            if np.any(a != 0):
                r = max(r, -theta)
        for start, _, mat in self.density:
            if np.any(mat != 0):
                r = max(r, -start)
        return r

    def scaled(self, c: float) -> "SignedMatrixMeasure":
        return SignedMatrixMeasure(
            self.r0,
            atoms=tuple((th, c * a) for th, a in self.atoms),
            density=tuple((s, e, c * m) for s, e, m in self.density),
        )

    def atom_at_zero(self) -> np.ndarray:
        out = np.zeros((self.d, self.d))
        for theta, a in self.atoms:
            if theta == 0.0:
                out += a
        return out

    def without_zero_atom(self) -> "SignedMatrixMeasure":
        kept = tuple((th, a) for th, a in self.atoms if th != 0.0)
        if not kept and not self.density:
            return SignedMatrixMeasure.zero(self.d, self.r0)
        return SignedMatrixMeasure(self.r0, atoms=kept, density=self.density)

    def is_dirac_at_zero(self) -> bool:
        """True when all mass sits at ``theta = 0``."""
        return not any(np.any(m != 0) for _, _, m in self.density) and all(
            th == 0.0 or not np.any(a != 0) for th, a in self.atoms)

    def total_variation_matrix(self) -> np.ndarray:
        """Entrywise total variations ``|nu_ij|([-r0, 0])``."""
        d = self.d
        tv = np.zeros((d, d))
        by_loc: dict[float, np.ndarray] = {}
        for theta, a in self.atoms:
            by_loc[theta] = by_loc.get(theta, 0.0) + a
        for a in by_loc.values():
            tv += np.abs(a)
        if self.density:
            cuts = sorted({p for s, e, _ in self.density for p in (s, e)})
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                mid = 0.5 * (lo + hi)
                tot = np.zeros((d, d))
                for s, e, mat in self.density:
                    if s <= mid < e:
                        tot = tot + mat
                tv += np.abs(tot) * (hi - lo)
        return tv

    def density_weights(self, h: float) -> np.ndarray:
        """Grid weights ``W[j]`` with ``int rho(t) xi(t) dt = sum_j W[j] @ xi_j``.

        Exact for piecewise-linear ``xi`` (hat-function integrals); equal to
        the trapezoid rule when the density pieces are aligned with the grid.
        """
        key = round(h / self.r0 * 2**40)
        cached = self._weights_cache.get(key)
        if cached is not None:
            return cached
        m = grid_steps(self.r0, h)
        d = self.d
        weights = np.zeros((m + 1, d, d))
        left = -self.r0 + h * np.arange(m)
        right = left + h
        for start, stop, mat in self.density:
            lo = np.clip(np.maximum(left, start), left, right)
            hi = np.clip(np.minimum(right, stop), left, right)
            ok = hi > lo
            # integrals of the two hat pieces over [lo, hi] within each cell
            a = (right - lo) / h
            b = (right - hi) / h
            w_left = np.where(ok, 0.5 * h * (a * a - b * b), 0.0)
            a2 = (lo - left) / h
            b2 = (hi - left) / h
            w_right = np.where(ok, 0.5 * h * (b2 * b2 - a2 * a2), 0.0)
            weights[:-1] += w_left[:, None, None] * mat
            weights[1:] += w_right[:, None, None] * mat
        weights.setflags(write=False)
        self._weights_cache[key] = weights
        return weights

    def apply(self, values: np.ndarray, h: float) -> np.ndarray:
        """Batched ``int nu(dtheta) xi(theta)`` for segments of shape ``(..., m + 1, d)``."""
        m = values.shape[-2] - 1
        out = np.zeros(values.shape[:-2] + (values.shape[-1],))
        for theta, a in self.atoms:
            j, w = _interp_position(theta, self.r0, h, m)
            out += _read(values, j, w) @ a.T
        if self.density:
            W = self.density_weights(h)
            rows = np.flatnonzero(np.any(W != 0, axis=(1, 2)))
            if rows.size:
                lo, hi = rows[0], rows[-1] + 1
                out += np.tensordot(values[..., lo:hi, :], W[lo:hi], axes=([-2, -1], [0, 2]))
        return out


def apply_measure(nu: SignedMatrixMeasure, seg: Segment) -> np.ndarray:
    """Evaluate ``int nu(dtheta) seg(theta)``.

    Atoms read the segment by linear interpolation; the density part is
    integrated exactly against the piecewise-linear segment (trapezoid rule
    on grid-aligned pieces).
    """
    if abs(seg.r0 - nu.r0) > _GRID_RTOL * nu.r0:
        raise ModelValidationError(
            f"delay-length mismatch: segment r0={seg.r0}, measure r0={nu.r0}")
    if seg.d != nu.d:
        raise ModelValidationError(f"dimension mismatch: segment d={seg.d}, measure d={nu.d}")
    return nu.apply(seg.values, seg.h)


def nu_total_variation_norm(nu: SignedMatrixMeasure) -> float:
    """``max_i sqrt(sum_j |nu_ij|([-r0, 0])^2)``."""
    tv = nu.total_variation_matrix()
    return float(np.max(np.sqrt(np.sum(tv * tv, axis=1))))


# ---------------------------------------------------------------------------
# Drift families
# ---------------------------------------------------------------------------


class LinearDrift:
    """``Z(x) = A x``."""

    def __init__(self, A):
        self.A = _as_matrix(A)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.A.T

    @property
    def one_sided_rate(self) -> float:
        """Largest ``k1`` with ``<Z(x) - Z(y), x - y> <= -k1 |x - y|^2``."""
        sym = 0.5 * (self.A + self.A.T)
        return float(-np.max(np.linalg.eigvalsh(sym)))

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.A, 2))

    def __repr__(self):
        return f"LinearDrift(A={self.A.tolist()})"


class ZeroDrift(LinearDrift):
    def __init__(self, d: int):
        super().__init__(np.zeros((d, d)))

    def __call__(self, x):
        return np.zeros_like(x)


class ZeroDelay:
    lipschitz = 0.0

    def __call__(self, seg: np.ndarray, h: float) -> np.ndarray:
        return np.zeros(seg.shape[:-2] + (seg.shape[-1],))

    def __repr__(self):
        return "ZeroDelay()"


class DiscreteDelay:
    """``b(xi) = B xi(theta)``; ``theta`` defaults to ``-r0`` (oldest grid value)."""

    def __init__(self, B, theta: float | None = None, r0: float | None = None):
        self.B = _as_matrix(B)
        self.theta = theta
        self.r0 = r0

    def __call__(self, seg, h):
        m = seg.shape[-2] - 1
        if self.theta is None:
            return seg[..., 0, :] @ self.B.T
        j, w = _interp_position(self.theta, m * h, h, m)
        return _read(seg, j, w) @ self.B.T

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.B, 2))

    def __repr__(self):
        return f"DiscreteDelay(B={self.B.tolist()}, theta={self.theta})"


class DistributedDelay:
    """``b(xi) = int rho(dtheta) xi(theta)`` for a signed matrix measure ``rho``."""

    def __init__(self, rho: SignedMatrixMeasure):
        self.rho = rho

    def __call__(self, seg, h):
        return self.rho.apply(seg, h)

    @property
    def lipschitz(self) -> float:
        # |sum_j nu_ij Delta_j| <= sum_j |nu_ij| sup|Delta_j|; the vector of
        # componentwise sups has norm at most sqrt(d) * ||Delta||_inf.
        tv = self.rho.total_variation_matrix()
        return float(math.sqrt(tv.shape[0]) * np.linalg.norm(tv, 2))

    def __repr__(self):
        return f"DistributedDelay({self.rho!r})"


class TanhDelay:
    """``b(xi) = c * tanh(xi(theta))`` entrywise; ``theta`` defaults to ``-r0``."""

    def __init__(self, c, theta: float | None = None):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))
        self.theta = theta

    def __call__(self, seg, h):
        m = seg.shape[-2] - 1
        if self.theta is None:
            x = seg[..., 0, :]
        else:
            j, w = _interp_position(self.theta, m * h, h, m)
            x = _read(seg, j, w)
        return self.c * np.tanh(x)

    @property
    def lipschitz(self) -> float:
        return float(np.max(np.abs(self.c)))

    def __repr__(self):
        return f"TanhDelay(c={self.c.tolist()}, theta={self.theta})"


class SumDelay:
    def __init__(self, *parts):
        self.parts = parts

    def __call__(self, seg, h):
        out = self.parts[0](seg, h)
        for p in self.parts[1:]:
            out = out + p(seg, h)
        return out

    @property
    def lipschitz(self) -> float:
        return float(sum(p.lipschitz for p in self.parts))

    def __repr__(self):
        return "SumDelay(" + ", ".join(map(repr, self.parts)) + ")"


def pointwise(fn: Callable[[Segment], Sequence[float]], r0: float):
    """Wrap a ``Segment -> R^d`` function as a batched segment functional."""

    def batched(seg: np.ndarray, h: float) -> np.ndarray:
        flat = seg.reshape((-1,) + seg.shape[-2:])
        out = np.array([np.atleast_1d(fn(Segment(r0, h, s))) for s in flat], dtype=float)
        return out.reshape(seg.shape[:-2] + (seg.shape[-1],))

    batched.__name__ = getattr(fn, "__name__", "pointwise")
    return batched


# ---------------------------------------------------------------------------
# Certificates and models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DissipativityCert:
    """Rates ``(lambda1, lambda2)`` in the one-sided segment dissipativity bound."""

    lambda1: float
    lambda2: float

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ModelValidationError("lambda1 and lambda2 must be non-negative")

    def rate(self, r0: float) -> float:
        from .certify import rate_thm11

        return rate_thm11(self.lambda1, self.lambda2, r0).lam

    def rate_positive(self, r0: float) -> bool:
        return self.rate(r0) > 0


@dataclass(frozen=True)
class LipschitzCert:
    """``k1``: one-sided rate of ``Z``; ``k2``: Lipschitz constant of ``b``."""

    k1: float
    k2: float

    def __post_init__(self):
        if self.k2 < 0:
            raise ModelValidationError("k2 must be non-negative")

    def dissipativity(self, s: float) -> DissipativityCert:
        """The family ``(2 k1 - s, k2^2 / s)`` obtained by Young's inequality."""
        return DissipativityCert(max(2 * self.k1 - s, 0.0), self.k2**2 / s)


def _check_sigma(sigma, d: int) -> np.ndarray:
    sig = _as_matrix(sigma, d)
    if not np.all(np.isfinite(sig)):
        raise ModelValidationError("sigma must be finite")
    smin = np.linalg.svd(sig, compute_uv=False).min()
    if not smin > 1e-14 * max(1.0, np.abs(sig).max()):
        raise ModelValidationError("singular sigma: the Girsanov drift needs sigma^{-1}")
    return sig


@dataclass(frozen=True)
class FsdeModel:
    """``dX = {Z(X(t)) + b(X_t)} dt + sigma dB``.

    Parameters
    ----------
    d : int
        State dimension.
    r0 : float
        Delay length.
    Z : callable
        Batched ``(n, d) -> (n, d)``.
    b : callable
        Batched ``(segments, h) -> (n, d)``.
    sigma : array_like
        Invertible noise matrix.
    dissipativity, lipschitz : optional certificates
    """

    d: int
    r0: float
    Z: Callable
    b: Callable
    sigma: np.ndarray
    dissipativity: DissipativityCert | None = None
    lipschitz: LipschitzCert | None = None
    name: str = "fsde"
    allow_degenerate: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.allow_degenerate:
            sig = _as_matrix(self.sigma, self.d)
        else:
            sig = _check_sigma(self.sigma, self.d)
        sig.setflags(write=False)
        object.__setattr__(self, "sigma", sig)
        if not self.r0 > 0:
            raise ModelValidationError("r0 must be positive")

    @property
    def sigma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.sigma)

    @property
    def sigma_inv_norm(self) -> float:
        return float(np.linalg.norm(self.sigma_inv, 2))

    def drift(self, seg: np.ndarray, h: float) -> np.ndarray:
        return self.Z(seg[..., -1, :]) + self.b(seg, h)

    def with_sigma(self, sigma) -> "FsdeModel":
        """Copy with another noise matrix; ``sigma = 0`` gives the deterministic flow."""
        return dataclasses.replace(self, sigma=sigma,
                                   allow_degenerate=not np.any(np.asarray(sigma)))

    def with_certificates(self, dissipativity=None, lipschitz=None) -> "FsdeModel":
        return dataclasses.replace(self, dissipativity=dissipativity, lipschitz=lipschitz)


@dataclass(frozen=True)
class SemiLinearModel:
    """``dX = {int nu(dtheta) X(t + theta) + b(X_t)} dt + sigma dB``."""

    nu: SignedMatrixMeasure
    sigma: np.ndarray
    b: Callable | None = None
    k2: float = 0.0
    dissipativity: DissipativityCert | None = None
    lipschitz: LipschitzCert | None = None
    name: str = "semilinear"
    allow_degenerate: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.k2 < 0:
            raise ModelValidationError("k2 must be non-negative")
        if self.allow_degenerate:
            sig = _as_matrix(self.sigma, self.nu.d)
        else:
            sig = _check_sigma(self.sigma, self.nu.d)
        sig.setflags(write=False)
        object.__setattr__(self, "sigma", sig)
        if self.b is None:
            object.__setattr__(self, "b", ZeroDelay())

    @property
    def d(self) -> int:
        return self.nu.d

    @property
    def r0(self) -> float:
        return self.nu.r0

    @property
    def sigma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.sigma)

    @property
    def sigma_inv_norm(self) -> float:
        return float(np.linalg.norm(self.sigma_inv, 2))

    @property
    def has_nonlinearity(self) -> bool:
        return not isinstance(self.b, ZeroDelay) and self.k2 > 0

    def drift(self, seg: np.ndarray, h: float) -> np.ndarray:
        return self.nu.apply(seg, h) + self.b(seg, h)

    def with_sigma(self, sigma) -> "SemiLinearModel":
        return dataclasses.replace(self, sigma=sigma,
                                   allow_degenerate=not np.any(np.asarray(sigma)))

    def as_fsde(self) -> FsdeModel:
        """Split off the atom at 0 as ``Z`` and fold the rest of ``nu`` into ``b``."""
        A0 = self.nu.atom_at_zero()
        rest = self.nu.without_zero_atom()
        Z = LinearDrift(A0)
        b = SumDelay(DistributedDelay(rest), self.b)
        rest_lip = DistributedDelay(rest).lipschitz
        lip = self.lipschitz or LipschitzCert(Z.one_sided_rate, self.k2 + rest_lip)
        return FsdeModel(self.d, self.r0, Z, b, self.sigma,
                         dissipativity=self.dissipativity, lipschitz=lip,
                         name=self.name, allow_degenerate=self.allow_degenerate)


# ---------------------------------------------------------------------------
# Validation and probing
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    valid: bool
    checks: dict

    def __bool__(self):
        return self.valid


def validate_model(m: FsdeModel | SemiLinearModel, h: float | None = None) -> ValidationReport:
    """Check sigma invertibility, grid alignment and measure support.

    Raises
    ------
    ModelValidationError
        On the first violated invariant.
    """
    checks = {}
    _check_sigma(m.sigma, m.d)
    checks["sigma_invertible"] = True
    if h is not None:
        grid_steps(m.r0, h)
        checks["grid_aligned"] = True
    if isinstance(m, SemiLinearModel):
        for theta, _ in m.nu.atoms:
            if not -m.nu.r0 <= theta <= 0:
                raise ModelValidationError(f"atom outside support: theta={theta}")
        if m.nu.d != m.d:
            raise ModelValidationError("measure dimension does not match model")
        checks["measure_support"] = True
    # drift sanity on a zero segment
    hh = h if h is not None else m.r0
    seg = np.zeros((1, grid_steps(m.r0, hh) + 1, m.d))
    out = np.asarray(m.drift(seg, hh))
    if out.shape != (1, m.d) or not np.all(np.isfinite(out)):
        raise ModelValidationError(f"drift returned invalid output of shape {out.shape}")
    checks["drift_finite"] = True
    return ValidationReport(True, checks)


@dataclass
class ProbeReport:
    """Outcome of a dissipativity falsification probe.

    ``status`` is ``"not falsified"`` for the returned candidate: the probe
    never proves the bound.
    """

    best: tuple[float, float] | None
    best_rate: float | None
    surviving: list
    witnesses: dict
    n_pairs: int
    status: str


def _random_segment_pairs(d, m, n, rng, scale):
    """Mix of rough random segments and constant-offset pairs."""
    base = rng.normal(scale=scale, size=(n, m + 1, d))
    base = np.cumsum(base, axis=1) / math.sqrt(m + 1)
    other = rng.normal(scale=scale, size=(n, m + 1, d))
    other = np.cumsum(other, axis=1) / math.sqrt(m + 1)
    k = n // 2
    shift = rng.normal(scale=scale, size=(k, 1, d))
    other[:k] = base[:k] + shift
    return base, other


def probe_dissipativity(m: FsdeModel, candidates: Sequence[tuple[float, float]],
                        n_pairs: int = 4000, h: float | None = None,
                        seed: int = 0, scale: float = 1.0) -> ProbeReport:
    """Search for sampled segment pairs that violate a candidate ``(lambda1, lambda2)``.

    For each pair the left side ``2 <Z(xi(0)) + b(xi) - Z(eta(0)) - b(eta),
    xi(0) - eta(0)>`` is compared with ``lambda2 ||xi - eta||^2 - lambda1
    |xi(0) - eta(0)|^2``.  Among candidates with no violation, the one with
    the largest rate ``sup_s (s - lambda2 e^{r0 s})`` is returned.
    """
    from .certify import rate_thm11

    h = h if h is not None else m.r0 / 16
    mm = grid_steps(m.r0, h)
    rng = np.random.default_rng(seed)
    xi, eta = _random_segment_pairs(m.d, mm, n_pairs, rng, scale)
    diff0 = xi[:, -1] - eta[:, -1]
    lhs = 2 * np.sum((m.drift(xi, h) - m.drift(eta, h)) * diff0, axis=1)
    sup2 = np.max(np.sum((xi - eta) ** 2, axis=2), axis=1)
    pt2 = np.sum(diff0**2, axis=1)
    surviving = []
    witnesses = {}
    for lam1, lam2 in candidates:
        rhs = lam2 * sup2 - lam1 * pt2
        slack = 1e-10 * (1 + np.abs(lhs) + np.abs(rhs))
        bad = np.nonzero(lhs > rhs + slack)[0]
        if bad.size:
            i = int(bad[np.argmax((lhs - rhs)[bad])])
            witnesses[(lam1, lam2)] = {
                "xi": xi[i].copy(), "eta": eta[i].copy(),
                "lhs": float(lhs[i]), "rhs": float(rhs[i]),
            }
        else:
            surviving.append((lam1, lam2))
    best, best_rate = None, None
    for c in surviving:
        lam = rate_thm11(c[0], c[1], m.r0).lam
        if best_rate is None or lam > best_rate:
            best, best_rate = c, lam
    return ProbeReport(best, best_rate, surviving, witnesses, n_pairs, "not falsified")
