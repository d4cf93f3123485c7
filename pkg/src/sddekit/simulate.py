"""Euler–Maruyama for the segment process and the two couplings.

Replicas are batched.  Random numbers come in fixed blocks of
:data:`BLOCK` replicas; block ``b`` draws from ``default_rng([seed, b])``
one ``(BLOCK, d)`` array per step.  A replica's noise therefore depends
only on ``(seed, replica index)``, so a run split into chunks of replicas
reproduces the unsplit run exactly.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import FsdeModel, Segment, SemiLinearModel, grid_steps
from .spectral import GammaTable

__all__ = [
    "BLOCK",
    "SimulationError",
    "NoiseStream",
    "PathRecord",
    "CouplingRun",
    "CouplingBatch",
    "run_batch",
    "simulate",
    "simulate_coupled",
    "control_g",
    "cd3_envelope",
    "girsanov_coupling",
    "girsanov_batch",
    "representation_path",
]

BLOCK = 1024


class SimulationError(RuntimeError):
    pass


def _steps(T: float, h: float, what: str = "T") -> int:
    n = int(round(T / h))
    if n < 0 or abs(n * h - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"{what}={T} must be a non-negative multiple of h={h}")
    return n


class NoiseStream:
    """Standard normal draws for replicas ``first .. first + n - 1``.

    Examples
    --------
    >>> a = NoiseStream(7, n=3, d=1).draw()
    >>> b = NoiseStream(7, n=1, d=1, first=2).draw()
    >>> bool(a[2, 0] == b[0, 0])
    True
    """

    def __init__(self, seed: int, n: int, d: int, first: int = 0, stream: int = 0):
        if n < 1:
            raise ValueError("need at least one replica")
        b0, b1 = first // BLOCK, (first + n - 1) // BLOCK
        # ``stream`` separates independent noise sources for the same replicas
        extra = [int(stream)] if stream else []
        self._gens = [np.random.default_rng([int(seed), b] + extra)
                      for b in range(b0, b1 + 1)]
        self._lo = first - b0 * BLOCK
        self.n, self.d = n, d

    def draw(self) -> np.ndarray:
        if len(self._gens) == 1:
            z = self._gens[0].standard_normal((BLOCK, self.d))
        else:
            z = np.concatenate([g.standard_normal((BLOCK, self.d)) for g in self._gens])
        return z[self._lo:self._lo + self.n]


class _Window:
    """Sliding segment store: ``view()`` is always the latest ``m + 1`` states."""

    def __init__(self, init: np.ndarray, chunk: int = 512):
        n, mp1, d = init.shape
        self.m = mp1 - 1
        self.buf = np.empty((n, mp1 + chunk, d))
        self.buf[:, :mp1] = init
        self.pos = self.m

    def view(self) -> np.ndarray:
        return self.buf[:, self.pos - self.m:self.pos + 1]

    def last(self) -> np.ndarray:
        return self.buf[:, self.pos]

    def push(self, x: np.ndarray) -> None:
        if self.pos + 1 == self.buf.shape[1]:
            m = self.m
            self.buf[:, :m] = self.buf[:, self.pos - m + 1:self.pos + 1]
            self.pos = m - 1
        self.pos += 1
        self.buf[:, self.pos] = x


def _initial(seg, r0: float, h: float, n: int) -> np.ndarray:
    """Broadcast a segment (or an ``(n, m+1, d)`` array) to the batch."""
    m = grid_steps(r0, h)
    if isinstance(seg, Segment):
        if seg.m != m or abs(seg.r0 - r0) > 1e-12 * r0:
            raise ValueError("initial segment is not on the simulation grid")
        vals = seg.values
    else:
        vals = np.asarray(seg, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
    if vals.ndim == 2:
        vals = np.broadcast_to(vals, (n,) + vals.shape)
    if vals.shape[:2] != (n, m + 1):
        raise ValueError(f"initial data has shape {vals.shape}, expected ({n}, {m + 1}, d)")
    return np.array(vals, dtype=float)


def run_batch(model, inits, T: float, h: float, seed: int, first: int = 0,
              on_step=None, stream: int = 0) -> list[np.ndarray]:
    """Advance one or more batches of replicas driven by the same noise.

    Parameters
    ----------
    model : FsdeModel or SemiLinearModel
    inits : list of arrays ``(n, m + 1, d)``
        Initial segments; every batch sees identical noise increments.
    on_step : callable, optional
        ``on_step(k, windows)`` after initialisation (``k = 0``) and after
        every step ``k``; ``windows`` are the current segment views.

    Returns
    -------
    list of arrays
        Final segments.
    """
    N = _steps(T, h)
    n = inits[0].shape[0]
    wins = [_Window(x) for x in inits]
    noise = NoiseStream(seed, n, model.d, first, stream)
    sig_t = np.asarray(model.sigma).T
    sq = math.sqrt(h)
    if on_step is not None:
        on_step(0, [w.view() for w in wins])
    for k in range(N):
        dw = (sq * noise.draw()) @ sig_t
        for w in wins:
            x = w.last() + model.drift(w.view(), h) * h + dw
            if not np.all(np.isfinite(x)):
                bad = int(np.argmax(~np.all(np.isfinite(x), axis=1)))
                raise SimulationError(
                    f"non-finite state at t={(k + 1) * h:.6g} (replica {first + bad}); "
                    "reduce h or check the drift")
            w.push(x)
        if on_step is not None:
            on_step(k + 1, [w.view() for w in wins])
    return [w.view().copy() for w in wins]


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


@dataclass
class PathRecord:
    """Grid path(s) on ``[-r0, T]``.

    ``states`` has shape ``(n, m + 1 + N, d)``; index ``m`` is time 0.
    """

    h: float
    r0: float
    T: float
    states: np.ndarray
    seed: int
    first_replica: int = 0

    @property
    def m(self) -> int:
        return grid_steps(self.r0, self.h)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.h * np.arange(self.states.shape[1] - self.m)

    def _index(self, t: float) -> int:
        k = _steps(t, self.h, "t")
        if k > self.states.shape[1] - self.m - 1:
            raise ValueError(f"t={t} beyond horizon T={self.T}")
        return k

    def x_at(self, t: float) -> np.ndarray:
        """``X(t)`` for every replica, shape ``(n, d)``."""
        return self.states[:, self.m + self._index(t)]

    def segment_at(self, t: float, replica: int = 0) -> Segment:
        k = self._index(t)
        return Segment(self.r0, self.h, self.states[replica, k:k + self.m + 1].copy())

    def to_csv(self, replica: int = 0, fh=None) -> str:
        buf = io.StringIO() if fh is None else fh
        d = self.states.shape[-1]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(d)])
        for t, x in zip(self.times, self.states[replica, self.m:]):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x])
        return buf.getvalue() if fh is None else ""


def simulate(m, xi, T: float, h: float, seed: int = 0, n: int = 1,
             first_replica: int = 0) -> PathRecord:
    """Euler–Maruyama paths ``X(t_{j+1}) = X(t_j) + drift h + sigma sqrt(h) zeta_j``."""
    init = _initial(xi, m.r0, h, n)
    N = _steps(T, h)
    mm = init.shape[1] - 1
    states = np.empty((n, mm + 1 + N, m.d))
    states[:, :mm + 1] = init

    def record(k, wins):
        if k:
            states[:, mm + k] = wins[0][:, -1]

    run_batch(m, [init], T, h, seed, first_replica, record)
    return PathRecord(h, m.r0, N * h, states, seed, first_replica)


def simulate_coupled(m, xi, eta, T: float, h: float, seed: int = 0, n: int = 1,
                     first_replica: int = 0) -> tuple[PathRecord, PathRecord]:
    """Two solutions from ``xi`` and ``eta`` sharing every noise increment."""
    a = _initial(xi, m.r0, h, n)
    b = _initial(eta, m.r0, h, n)
    N = _steps(T, h)
    mm = a.shape[1] - 1
    sa = np.empty((n, mm + 1 + N, m.d))
    sb = np.empty_like(sa)
    sa[:, :mm + 1], sb[:, :mm + 1] = a, b

    def record(k, wins):
        if k:
            sa[:, mm + k] = wins[0][:, -1]
            sb[:, mm + k] = wins[1][:, -1]

    run_batch(m, [a, b], T, h, seed, first_replica, record)
    return (PathRecord(h, m.r0, N * h, sa, seed, first_replica),
            PathRecord(h, m.r0, N * h, sb, seed, first_replica))


# ---------------------------------------------------------------------------
# Girsanov coupling
# ---------------------------------------------------------------------------


def _log_int_exp(k1: float, t: float) -> float:
    """``log int_0^t e^{2 k1 s} ds``."""
    x = 2.0 * k1 * t
    if abs(x) < 1e-5:
        return math.log(t) + math.log1p(x / 2.0 + x * x / 6.0)
    if x > 50.0:
        return x + math.log1p(-math.exp(-x)) - math.log(2.0 * k1)
    return math.log(math.expm1(x) / (2.0 * k1))


def control_g(k1: float, delta0: float, t: float, s) -> np.ndarray | float:
    """Control speed ``delta0 e^{k1 s} / int_0^t e^{2 k1 u} du``.

    Examples
    --------
    >>> round(control_g(1.0, 1.0, 1.0, 0.0), 6)
    0.313035
    """
    if not t > 0:
        raise ValueError("t must be positive")
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0) or np.any(s_arr > t * (1 + 1e-12)):
        raise ValueError("s must lie in [0, t]")
    if delta0 == 0:
        out = np.zeros_like(s_arr)
    else:
        out = np.exp(math.log(delta0) + k1 * s_arr - _log_int_exp(k1, t))
    return float(out) if out.ndim == 0 else out


def _expm1_ratio(a, b: float, frac):
    """``expm1(a) / expm1(b)`` where ``a = frac * b``, ``0 <= frac <= 1``."""
    a = np.asarray(a, dtype=float)
    if abs(b) < 1e-5:
        return frac * (1 + a / 2 + a * a / 6) / (1 + b / 2 + b * b / 6)
    if b > 30.0:
        return np.exp(a - b) * (-np.expm1(-a)) / (-math.expm1(-b))
    return np.expm1(a) / math.expm1(b)


def cd3_envelope(k1: float, delta0: float, t: float, s):
    """Distance bound ``delta0 (e^{2k1t - k1s} - e^{k1s}) / (e^{2k1t} - 1)`` for ``s <= t``."""
    s_arr = np.minimum(np.asarray(s, dtype=float), t)
    out = delta0 * np.exp(k1 * s_arr) * _expm1_ratio(2 * k1 * (t - s_arr), 2 * k1 * t,
                                                          (t - s_arr) / t)
    return float(out) if out.ndim == 0 else out


@dataclass
class CouplingBatch:
    """Per-replica summaries of a batch of Girsanov-coupled pairs.

    ``x_final`` holds the segments ``X_{t + r0}`` (equal to ``Y_{t + r0}``).
    ``cd3_excess`` is ``max_s (|X(s) - Y(s)| - envelope(s)) / delta0`` over
    grid ``s <= t`` (zero when ``delta0 = 0``).  ``h_energy`` is the
    discrete ``int |h(s)|^2 ds``.
    """

    t: float
    h: float
    tau: np.ndarray
    log_R: np.ndarray
    x_final: np.ndarray
    cd3_excess: np.ndarray
    h_energy: np.ndarray
    delta0: np.ndarray

    @property
    def R(self) -> np.ndarray:
        return np.exp(self.log_R)


@dataclass
class CouplingRun:
    """One coupled pair with its control, Girsanov drift and weight."""

    x_path: PathRecord
    y_path: PathRecord
    tau: float
    g_values: np.ndarray
    h_values: np.ndarray
    log_R_partial: np.ndarray
    log_R: float
    R: float = field(init=False)

    def __post_init__(self):
        self.R = float(math.exp(self.log_R))

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO() if fh is None else fh
        xs = self.x_path.states[0, self.x_path.m:]
        ys = self.y_path.states[0, self.y_path.m:]
        d = xs.shape[-1]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(d)] + [f"y_{i + 1}" for i in range(d)]
                   + ["dist", "g", "h_sq", "log_R"])
        n_steps = len(self.g_values)
        for k, t in enumerate(self.x_path.times):
            g = self.g_values[k] if k < n_steps else 0.0
            hs = float(np.sum(self.h_values[k] ** 2)) if k < n_steps else 0.0
            w.writerow([repr(float(t))] + [repr(float(v)) for v in xs[k]]
                       + [repr(float(v)) for v in ys[k]]
                       + [repr(float(np.linalg.norm(xs[k] - ys[k]))), repr(float(g)),
                          repr(hs), repr(float(self.log_R_partial[k]))])
        return buf.getvalue() if fh is None else ""


def _as_coupling_model(m) -> FsdeModel:
    fs = m.as_fsde() if isinstance(m, SemiLinearModel) else m
    if fs.lipschitz is None:
        raise ValueError("the Girsanov coupling needs a LipschitzCert (k1) on the model")
    return fs


def _coupling_core(m, xi, eta, t, h, seed, n, first, recorder=None, stream=0):
    fs = _as_coupling_model(m)
    r0 = fs.r0
    Nt = _steps(t, h, "t")
    if Nt < 1:
        raise ValueError("t must be a positive multiple of h")
    mm = grid_steps(r0, h)
    N = Nt + mm
    xa = _initial(xi, r0, h, n)
    ya = _initial(eta, r0, h, n)
    delta0 = np.linalg.norm(xa[:, -1] - ya[:, -1], axis=1)
    tol = np.maximum(1e-12, 1e-8 * delta0)
    k1 = fs.lipschitz.k1
    X, Y = _Window(xa), _Window(ya)
    noise = NoiseStream(seed, n, fs.d, first, stream)
    sigma = np.asarray(fs.sigma)
    sig_t, sinv_t = sigma.T, np.linalg.inv(sigma).T
    sq = math.sqrt(h)

    dist0 = np.linalg.norm(xa[:, -1] - ya[:, -1], axis=1)
    coupled = dist0 <= tol
    if np.any(coupled):
        Y.buf[coupled, Y.pos] = X.buf[coupled, X.pos]
    tau = np.where(coupled, 0.0, np.nan)
    log_r = np.zeros(n)
    energy = np.zeros(n)
    excess = np.zeros(n)
    # unit-displacement schedules, scaled per replica
    g_unit = np.atleast_1d(control_g(k1, 1.0, t, np.minimum(h * np.arange(Nt), t)))
    env_unit = np.atleast_1d(cd3_envelope(k1, 1.0, t, h * np.arange(Nt + 1)))
    scale = np.where(delta0 > 0, delta0, 1.0)

    for k in range(N):
        xw, yw = X.view(), Y.view()
        x, y = xw[:, -1], yw[:, -1]
        if k <= Nt:
            excess = np.maximum(excess, (np.linalg.norm(x - y, axis=1)
                                         - env_unit[k] * delta0) / scale)
        zx, zy = fs.Z(x), fs.Z(y)
        bx, by = fs.b(xw, h), fs.b(yw, h)
        c = np.zeros_like(x)
        hit = np.zeros(n, dtype=bool)
        active = ~coupled
        g = np.zeros(n)
        if k < Nt and np.any(active):
            g = g_unit[k] * delta0
            diff = x - y
            dist = np.linalg.norm(diff, axis=1)
            c_star = diff / h + zx - zy
            hit = active & ((np.linalg.norm(c_star, axis=1) <= g) | (k + 1 == Nt))
            unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff),
                             where=dist[:, None] > 0)
            c[active] = (g[:, None] * unit)[active]
            c[hit] = c_star[hit]
        db = sq * noise.draw()
        dw = db @ sig_t
        xn = x + (zx + bx) * h + dw
        yn = y + (zy + bx + c) * h + dw
        hv = (c + bx - by) @ sinv_t
        hsq = np.sum(hv * hv, axis=1)
        log_r += -np.sum(hv * db, axis=1) - 0.5 * h * hsq
        energy += hsq * h
        if not (np.all(np.isfinite(xn)) and np.all(np.isfinite(yn))):
            raise SimulationError(f"non-finite state at t={(k + 1) * h:.6g}")
        newly = hit | (active & (np.linalg.norm(xn - yn, axis=1) <= tol))
        snap = coupled | newly
        yn[snap] = xn[snap]
        tau[newly] = (k + 1) * h
        coupled = snap
        X.push(xn)
        Y.push(yn)
        if recorder is not None:
            recorder(k, xn, yn, np.where(active, g, 0.0), hv, log_r)
    if not np.all(coupled):
        raise SimulationError("coupling did not complete by the pre-horizon")
    return CouplingBatch(t, h, tau, log_r, X.view().copy(), excess, energy, delta0), (xa, ya)


def girsanov_batch(m, xi, eta, t: float, h: float, seed: int = 0, n: int = 1,
                   first_replica: int = 0, stream: int = 0) -> CouplingBatch:
    """Run ``n`` independent coupled pairs over ``[0, t + r0]``.

    ``Y`` follows ``Z(Y) + b(X_s) + g(s) (X - Y)/|X - Y|`` until it meets
    ``X``; the weight ``R`` converts expectations back to the law started
    at ``eta``.  ``xi`` and ``eta`` may be segments (shared by all
    replicas) or ``(n, m + 1, d)`` arrays of per-replica starting pairs.  When one step can close the gap at speed at most ``g``,
    or at the last step before ``t``, the control is chosen to land
    ``Y`` exactly on ``X``.
    """
    batch, _ = _coupling_core(m, xi, eta, t, h, seed, n, first_replica, stream=stream)
    return batch


def girsanov_coupling(m, xi, eta, t: float, h: float, seed: int = 0,
                      replica: int = 0) -> CouplingRun:
    """A single coupled pair with full path, control and weight records."""
    fs = _as_coupling_model(m)
    mm = grid_steps(fs.r0, h)
    N = _steps(t, h, "t") + mm
    xs = np.empty((N + 1, fs.d))
    ys = np.empty_like(xs)
    gs = np.zeros(N)
    hs = np.zeros((N, fs.d))
    lr = np.zeros(N + 1)

    def rec(k, xn, yn, g, hv, log_r):
        xs[k + 1], ys[k + 1] = xn[0], yn[0]
        gs[k], hs[k], lr[k + 1] = g[0], hv[0], log_r[0]

    batch, (xa, ya) = _coupling_core(m, xi, eta, t, h, seed, 1, replica, rec)
    xs[0], ys[0] = xa[0, -1], ya[0, -1]
    if batch.tau[0] == 0.0:
        ys[0] = xs[0]
    xp = PathRecord(h, fs.r0, N * h, np.concatenate([xa[0, :-1], xs])[None], seed, replica)
    yp = PathRecord(h, fs.r0, N * h, np.concatenate([ya[0, :-1], ys])[None], seed, replica)
    return CouplingRun(xp, yp, float(batch.tau[0]), gs, hs, lr, float(batch.log_R[0]))


# ---------------------------------------------------------------------------
# Variation of constants
# ---------------------------------------------------------------------------


def _conv(gam: np.ndarray, forcing: np.ndarray, N: int) -> np.ndarray:
    """``out[n] = sum_{k < n} gam[n - k] @ forcing[k]`` for ``n = 0..N``."""
    d = gam.shape[-1]
    out = np.zeros((N + 1, d))
    for i in range(d):
        for j in range(d):
            out[1:, i] += np.convolve(gam[1:N + 1, i, j], forcing[:N, j])[:N]
    return out


def representation_path(m: SemiLinearModel, gamma: GammaTable, xi, T: float, h: float,
                        seed: int = 0, replica: int = 0, tol: float = 1e-10,
                        max_sweeps: int = 50) -> PathRecord:
    """Path from the variation-of-constants formula.

    ``X(t) = Gamma(t) xi(0) + int nu(dtheta) int_theta^0 Gamma(t + theta - s) xi(s) ds
    + int_0^t Gamma(t - s) b(X_s) ds + int_0^t Gamma(t - s) sigma dB(s)``,

    with the inner integral by the trapezoid rule on the segment grid and
    the time integrals by left-point sums driven by the same noise
    increments as :func:`simulate`.  A nonlinear ``b`` is handled by
    Picard sweeps over the whole path.
    """
    if not isinstance(m, SemiLinearModel):
        raise TypeError("representation_path needs a SemiLinearModel")
    if abs(gamma.h - h) > 1e-12 * h:
        raise ValueError("gamma table must use the simulation step")
    N = _steps(T, h)
    if gamma.T < T - 1e-9:
        raise ValueError(f"gamma horizon too short: {gamma.T} < {T}")
    nu, d, r0 = m.nu, m.d, m.r0
    mm = grid_steps(r0, h)
    x0 = _initial(xi, r0, h, 1)[0]
    G = gamma.values  # index j <-> time (j - mm) h
    Gpos = G[mm:mm + N + 1]  # Gamma(k h), k = 0..N

    # history term: F_n(theta_j) = int_{theta_j}^0 Gamma(t_n + theta_j - s) xi(s) ds
    W = nu.density_weights(h)
    need = set(np.flatnonzero(np.any(W != 0, axis=(1, 2))).tolist())
    for theta, _ in nu.atoms:
        pos = (theta + r0) / h
        need.update({int(math.floor(pos)), min(int(math.ceil(pos)), mm)})
    F = np.zeros((N + 1, mm + 1, d))
    n_idx = np.arange(N + 1)
    for j in sorted(need):
        if j >= mm:
            continue
        i = np.arange(j, mm + 1)
        w = np.full(i.size, h)
        w[0] = w[-1] = 0.5 * h
        # Gamma at t_n + (j - i) h, table index mm + n + j - i (zero below mm)
        idx = mm + n_idx[:, None] + j - i[None, :]
        F[:, j] = np.einsum("nkab,kb,k->na", G[idx], x0[i], w)
    history = nu.apply(F, h)
    base = np.einsum("nab,b->na", Gpos, x0[-1]) + history

    noise = NoiseStream(seed, 1, d, replica)
    db = math.sqrt(h) * np.concatenate([noise.draw() for _ in range(N)]) if N else np.zeros((0, d))
    stoch = _conv(Gpos, db @ np.asarray(m.sigma).T, N) if N else np.zeros((1, d))
    lin = base + stoch

    states = np.concatenate([x0[:-1], lin])
    if m.has_nonlinearity and N:
        for _ in range(max_sweeps):
            wins = sliding_window_view(states, (mm + 1, d))[:N, 0]
            bvals = m.b(wins, h)
            new = np.concatenate([x0[:-1], lin + _conv(Gpos, bvals * h, N)])
            change = float(np.max(np.abs(new - states)))
            states = new
            if change < tol:
                break
    return PathRecord(h, r0, N * h, states[None], seed, replica)
