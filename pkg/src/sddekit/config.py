"""Run configuration: strict TOML parsing and model construction.

A config file has the sections ``[model]``, ``[measure]``,
``[certificates]``, ``[sim]``, ``[spectral]``, ``[verify]`` and
``[output]``.  Every key is optional unless noted in the README; unknown
sections or keys raise :class:`ConfigError`.  Matrices are flat row-major
number lists.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (DiscreteDelay, DissipativityCert, DistributedDelay, FsdeModel, LinearDrift,
                    LipschitzCert, ModelValidationError, Segment, SemiLinearModel,
                    SignedMatrixMeasure, TanhDelay, ZeroDelay, ZeroDrift)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = ["ConfigError", "RunConfig", "BUDGETS", "load_config", "parse_config",
           "build_model", "linear_split", "initial_segment", "bundled_config", "bundled_names"]


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (CLI exit code 2)."""


# (n, steps per delay length)
BUDGETS = {"smoke": (500, 32), "default": (10_000, 256), "deep": (100_000, 512)}

ALL_CHECKS = ("contraction", "exp_moment", "harnack", "girsanov_moments", "memory_passthrough",
              "stationarity", "shift_invariance", "l2_decay", "hyperbound", "restart_coupling",
              "tv_bound")


@dataclass
class ModelSection:
    kind: str = "fsde"
    name: str = ""
    d: int = 1
    r0: float = 1.0
    sigma: list | float = field(default_factory=lambda: [1.0])
    Z: str = "zero"
    A: list = field(default_factory=list)
    b: str = "zero"
    B: list = field(default_factory=list)
    c: list = field(default_factory=list)
    b_theta: float | None = None
    b_start: float | None = None
    b_stop: float | None = None


@dataclass
class MeasureSection:
    atom_theta: list = field(default_factory=list)
    atom_A: list = field(default_factory=list)
    density_start: list = field(default_factory=list)
    density_stop: list = field(default_factory=list)
    density_value: list = field(default_factory=list)


@dataclass
class CertificatesSection:
    lambda1: float | None = None
    lambda2: float | None = None
    k1: float | None = None
    k2: float | None = None


@dataclass
class SimSection:
    h: float | None = None
    T: float = 10.0
    seed: int = 0
    n: int | None = None
    xi: list = field(default_factory=list)
    xi_slope: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    eta_slope: list = field(default_factory=list)


@dataclass
class SpectralSection:
    T: float = 10.0
    tol: float = 1e-8
    pp_lambda: float | None = None
    ck_points: int = 64
    ck_horizon: float | None = None


@dataclass
class VerifySection:
    checks: list = field(default_factory=lambda: list(ALL_CHECKS))
    allow_inconclusive: bool = True
    p: list = field(default_factory=lambda: [2.0, 4.0])
    t: float = 1.0
    functionals: list = field(default_factory=lambda: ["tanh", "cyl_exp", "sin"])
    contraction_T: float | None = None
    contraction_lambda1: float | None = None
    eps_grid: list = field(default_factory=lambda: [0.05, 0.1, 0.2])
    t_grid: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    moment_functional: str = "sup"
    burn_in: float = 20.0
    spacing: float | None = None
    ensemble_n: int | None = None
    n_inner: int | None = None
    theta_grid: list | None = None
    l2_t_grid: list = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    l2_functionals: list = field(default_factory=lambda: ["linear", "tanh"])
    hyper_t: float = 1.0
    restart_t1: float = 2.0
    restart_t2: float = 4.0
    tv_t_grid: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    alpha: float = 0.01


@dataclass
class OutputSection:
    dir: str = "sddekit_out"
    formats: list = field(default_factory=lambda: ["json", "csv"])


_SECTIONS = {"model": ModelSection, "measure": MeasureSection,
             "certificates": CertificatesSection, "sim": SimSection,
             "spectral": SpectralSection, "verify": VerifySection, "output": OutputSection}


@dataclass
class RunConfig:
    """Parsed configuration plus the run-level overrides (seed, budget)."""

    model: ModelSection
    measure: MeasureSection
    certificates: CertificatesSection
    sim: SimSection
    spectral: SpectralSection
    verify: VerifySection
    output: OutputSection
    source: str = ""
    budget: str | None = None

    # -- effective simulation settings ------------------------------------

    @property
    def h(self) -> float:
        if self.budget is None and self.sim.h is not None:
            return float(self.sim.h)
        return self.model.r0 / BUDGETS[self.budget or "default"][1]

    @property
    def n(self) -> int:
        if self.budget is None and self.sim.n is not None:
            return int(self.sim.n)
        return BUDGETS[self.budget or "default"][0]

    @property
    def seed(self) -> int:
        return int(self.sim.seed)

    def with_overrides(self, seed: int | None = None, budget: str | None = None) -> "RunConfig":
        out = dataclasses.replace(self, sim=dataclasses.replace(self.sim), budget=budget or self.budget)
        if seed is not None:
            out.sim.seed = int(seed)
        if out.budget is not None and out.budget not in BUDGETS:
            raise ConfigError(f"unknown budget {out.budget!r}")
        return out

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        out["effective"] = {"h": self.h, "n": self.n, "seed": self.seed, "budget": self.budget}
        return out

    def hash(self) -> str:
        """SHA-256 of the canonical JSON of the effective configuration."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


_STRING_LISTS = ("checks", "functionals", "l2_functionals", "formats")


def _coerce(section: str, key: str, value, default, kind: str = ""):
    if default is None and not kind.startswith("list"):
        # optional scalar: the annotation says which
        default = 0 if kind.startswith("int") else 0.0
    if default is None or isinstance(default, list):
        items = value if isinstance(value, list) else [value]
        want = str if key in _STRING_LISTS else (int, float, list)
        if any(isinstance(v, bool) or not isinstance(v, want) for v in items):
            raise ConfigError(f"[{section}] {key}: wrong value type")
        return value
    if isinstance(value, bool) and not isinstance(default, bool):
        raise ConfigError(f"[{section}] {key}: expected a number or list, got a boolean")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"[{section}] {key}: expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if not isinstance(value, int):
            raise ConfigError(f"[{section}] {key}: expected an integer")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"[{section}] {key}: expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"[{section}] {key}: expected a string")
        return value
    return value


def parse_config(data: dict, source: str = "<dict>") -> RunConfig:
    """Build a :class:`RunConfig` from a parsed TOML table, rejecting unknown names."""
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in _SECTIONS.items():
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}] must be a table")
        obj = cls()
        kinds = {f.name: str(f.type) for f in dataclasses.fields(cls)}
        names = set(kinds)
        bad = set(raw) - names
        if bad:
            raise ConfigError(f"[{name}] unknown key(s): {', '.join(sorted(bad))}")
        for key, value in raw.items():
            setattr(obj, key, _coerce(name, key, value, getattr(obj, key), kinds[key]))
        parts[name] = obj
    cfg = RunConfig(**parts, source=source)
    _check(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data, str(path))


def bundled_names() -> list[str]:
    return sorted(p.stem for p in (Path(__file__).parent / "configs").glob("*.toml"))


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``name`` with or without ``.toml``)."""
    if not name.endswith(".toml"):
        name += ".toml"
    path = Path(__file__).parent / "configs" / name
    if not path.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return path


def _check(cfg: RunConfig) -> None:
    m = cfg.model
    if m.kind not in ("fsde", "semilinear"):
        raise ConfigError("[model] kind must be 'fsde' or 'semilinear'")
    if m.d < 1 or not m.r0 > 0:
        raise ConfigError("[model] needs d >= 1 and r0 > 0")
    if m.Z not in ("zero", "linear"):
        raise ConfigError("[model] Z must be 'zero' or 'linear'")
    if m.b not in ("zero", "discrete_delay", "tanh_delay", "distributed_delay"):
        raise ConfigError("[model] b must be zero, discrete_delay, tanh_delay or distributed_delay")
    if m.kind == "semilinear" and not cfg.measure.atom_theta and not cfg.measure.density_start:
        raise ConfigError("semilinear model needs a [measure]")
    if cfg.sim.h is not None and cfg.sim.h <= 0:
        raise ConfigError("[sim] h must be positive")
    bad = set(cfg.verify.checks) - set(ALL_CHECKS)
    if bad:
        raise ConfigError(f"[verify] unknown check(s): {', '.join(sorted(bad))}")
    bad = set(cfg.output.formats) - {"json", "csv"}
    if bad:
        raise ConfigError(f"[output] unknown format(s): {', '.join(sorted(bad))}")
    try:
        build_model(cfg)
        initial_segment(cfg, "xi", cfg.h)
        initial_segment(cfg, "eta", cfg.h)
    except (ModelValidationError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _matrix(values, d: int, what: str) -> np.ndarray:
    a = np.asarray(values, dtype=float).ravel()
    if a.size == 1:
        return a[0] * np.eye(d)
    if a.size != d * d:
        raise ConfigError(f"{what}: expected {d * d} entries (row-major), got {a.size}")
    return a.reshape(d, d)


def _vector(values, d: int, what: str, default: float = 0.0) -> np.ndarray:
    if values is None or (isinstance(values, list) and not values):
        return np.full(d, default)
    a = np.atleast_1d(np.asarray(values, dtype=float)).ravel()
    if a.size == 1:
        return np.full(d, a[0])
    if a.size != d:
        raise ConfigError(f"{what}: expected {d} entries, got {a.size}")
    return a


def _measure(cfg: RunConfig) -> SignedMatrixMeasure:
    ms, d, r0 = cfg.measure, cfg.model.d, cfg.model.r0
    if len(ms.atom_theta) != len(ms.atom_A):
        raise ConfigError("[measure] atom_theta and atom_A differ in length")
    n_dens = len(ms.density_start)
    if not (len(ms.density_stop) == len(ms.density_value) == n_dens):
        raise ConfigError("[measure] density_start/stop/value differ in length")
    atoms = [(th, _matrix(a, d, "[measure] atom_A")) for th, a in zip(ms.atom_theta, ms.atom_A)]
    dens = [(s, e, _matrix(v, d, "[measure] density_value"))
            for s, e, v in zip(ms.density_start, ms.density_stop, ms.density_value)]
    return SignedMatrixMeasure(r0, atoms, dens)


def _delay_term(cfg: RunConfig):
    """The configured ``b`` and, when it is linear, its measure."""
    m = cfg.model
    d, r0 = m.d, m.r0
    theta = -r0 if m.b_theta is None else m.b_theta
    if m.b == "zero":
        return ZeroDelay(), SignedMatrixMeasure(r0, [(0.0, np.zeros((d, d)))])
    if m.b == "discrete_delay":
        B = _matrix(m.B, d, "[model] B")
        b = DiscreteDelay(B, None if m.b_theta is None else theta)
        return b, SignedMatrixMeasure(r0, [(theta, B)])
    if m.b == "distributed_delay":
        start = -r0 if m.b_start is None else m.b_start
        stop = 0.0 if m.b_stop is None else m.b_stop
        rho = SignedMatrixMeasure(r0, density=[(start, stop, _matrix(m.B, d, "[model] B"))])
        return DistributedDelay(rho), rho
    c = _vector(m.c, d, "[model] c")
    return TanhDelay(c, None if m.b_theta is None else theta), None


def linear_split(cfg: RunConfig):
    """``(nu, b_nonlinear, k2)``: the linear part as a measure and the remainder.

    Returns ``None`` when ``Z`` is not linear in the configured family.
    ``k2`` is the certificate value when given, else the Lipschitz
    constant of the nonlinear remainder.
    """
    m = cfg.model
    d, r0 = m.d, m.r0
    if m.kind == "semilinear":
        nu = _measure(cfg)
        b, _ = _delay_term(cfg)
    else:
        A = _matrix(m.A, d, "[model] A") if m.Z == "linear" else np.zeros((d, d))
        b, lin = _delay_term(cfg)
        atoms = [(0.0, A)]
        dens = []
        if lin is not None and m.b != "zero":
            atoms += list(lin.atoms)
            dens = list(lin.density)
        if lin is not None:
            b = ZeroDelay()
        nu = SignedMatrixMeasure(r0, atoms, dens)
    k2 = cfg.certificates.k2
    if k2 is None or m.kind == "fsde":
        k2 = float(getattr(b, "lipschitz", 0.0))
    return nu, b, float(k2)


def build_model(cfg: RunConfig):
    """The configured :class:`FsdeModel` or :class:`SemiLinearModel`."""
    m, ce = cfg.model, cfg.certificates
    d = m.d
    sigma = _matrix(m.sigma, d, "[model] sigma")
    diss = None
    if ce.lambda1 is not None or ce.lambda2 is not None:
        if ce.lambda1 is None or ce.lambda2 is None:
            raise ConfigError("[certificates] lambda1 and lambda2 go together")
        diss = DissipativityCert(ce.lambda1, ce.lambda2)
    name = m.name or Path(cfg.source).stem or m.kind
    if m.kind == "semilinear":
        nu, b, k2 = linear_split(cfg)
        lip = None
        if ce.k1 is not None:
            lip = LipschitzCert(ce.k1, k2 if ce.k2 is None else ce.k2)
        return SemiLinearModel(nu, sigma, b, k2, dissipativity=diss, lipschitz=lip, name=name)
    Z = LinearDrift(_matrix(m.A, d, "[model] A")) if m.Z == "linear" else ZeroDrift(d)
    b, _ = _delay_term(cfg)
    if ce.k1 is not None or ce.k2 is not None:
        k1 = Z.one_sided_rate if ce.k1 is None else ce.k1
        k2 = b.lipschitz if ce.k2 is None else ce.k2
    else:
        k1, k2 = Z.one_sided_rate, b.lipschitz
    lip = LipschitzCert(k1, k2)
    return FsdeModel(d, m.r0, Z, b, sigma, dissipativity=diss, lipschitz=lip, name=name)


def initial_segment(cfg: RunConfig, which: str, h: float) -> Segment:
    """``xi`` or ``eta``: ``value + slope * theta`` on the grid (defaults 0 and 1)."""
    sim, d, r0 = cfg.sim, cfg.model.d, cfg.model.r0
    value = _vector(getattr(sim, which), d, f"[sim] {which}", 0.0 if which == "xi" else 1.0)
    slope = _vector(getattr(sim, which + "_slope"), d, f"[sim] {which}_slope")
    return Segment.from_function(lambda th: value + slope * th, r0, h)


def is_linear(cfg: RunConfig) -> bool:
    """True when the whole drift is linear (no tanh term)."""
    return cfg.model.b != "tanh_delay"


def default_spacing(cfg: RunConfig) -> float:
    return cfg.verify.spacing if cfg.verify.spacing is not None else max(cfg.model.r0, 1.0)

