"""Command-line interface: ``sddekit {certify, spectral, simulate, verify, report}``.

Exit codes: 0 pass, 1 certificate or verification failure, 2 usage or
configuration error.  Every command writes a JSON report (``schema: 1``)
that embeds the config hash and seed; apart from the ``timestamp`` field
re-running a command reproduces the file byte for byte.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, certify, spectral, verify
from .config import (ALL_CHECKS, BUDGETS, ConfigError, RunConfig, build_model, bundled_config,
                     default_spacing, initial_segment, is_linear, linear_split, load_config)
from .model import FsdeModel, ModelValidationError, ZeroDelay
from .simulate import run_batch, simulate as _simulate

SCHEMA = 1
EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def jsonable(obj):
    """Plain JSON types; non-finite floats become ``None``."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, complex):
        return [jsonable(obj.real), jsonable(obj.imag)]
    return obj


def envelope(command: str, cfg: RunConfig, payload: dict, status: str) -> dict:
    return {
        "schema": SCHEMA,
        "command": command,
        "sddekit_version": __version__,
        "config": Path(cfg.source).name,
        "config_hash": cfg.hash(),
        "seeds": {"seed": cfg.seed},
        "budget": cfg.budget,
        "h": cfg.h,
        "n": cfg.n,
        "status": status,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "results": payload,
    }


def dumps(report: dict) -> str:
    return json.dumps(jsonable(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


class Output:
    """Writes the files of one command into the output directory."""

    def __init__(self, cfg: RunConfig, out_dir: str | None):
        self.dir = Path(out_dir or cfg.output.dir)
        self.formats = set(cfg.output.formats)
        self.written: list[str] = []

    def _path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.written.append(str(p))
        return p

    def json(self, name: str, report: dict) -> None:
        if "json" in self.formats:
            self._path(name).write_text(dumps(report))

    def csv(self, name: str, header, rows) -> None:
        if "csv" in self.formats:
            _write_csv(self._path(name), header, rows)

    def text(self, name: str, body: str) -> None:
        if "csv" in self.formats:
            self._path(name).write_text(body)


# ---------------------------------------------------------------------------
# certify
# ---------------------------------------------------------------------------


def _ck_horizon(cfg: RunConfig, lam0: float) -> float:
    H = cfg.spectral.ck_horizon
    if H is None:
        H = min(max(10 * cfg.model.r0, 30.0 / max(-lam0, 1e-3)), 200.0)
    # whole number of steps
    return cfg.h * math.ceil(H / cfg.h - 1e-9)


def certify_run(cfg: RunConfig) -> tuple[list[certify.RateCert], dict]:
    """All rate certificates available for the configured model."""
    m = build_model(cfg)
    r0 = cfg.model.r0
    certs = []
    if m.dissipativity is not None:
        certs.append(certify.rate_thm11(m.dissipativity.lambda1, m.dissipativity.lambda2, r0))
    lip = (m if isinstance(m, FsdeModel) else m.as_fsde()).lipschitz
    if lip is not None:
        certs.append(certify.check_cor12(lip.k1, lip.k2, r0))
    nu, b_rest, k2 = linear_split(cfg)
    extra = {}
    root = spectral.lambda0(nu, tol=cfg.spectral.tol)
    lam0 = root.lambda0
    extra["lambda0"] = root.to_dict()
    if lam0 < 0 and k2 > 0:
        horizon = _ck_horizon(cfg, lam0)
        gam = spectral.gamma_solve(nu, horizon, cfg.h)
        certs.append(certify.rate_thm13(
            lam0, k2, r0, lambda ks: spectral.ck_empirical(gam, ks),
            ck_source=f"empirical (Euler table to t={horizon:g}, h={cfg.h:g})"))

        def pp(ks):
            return np.array([spectral.pp_bound(nu, -k, lambda0_value=lam0).bound for k in ks])

        certs.append(certify.rate_thm13(lam0, k2, r0, pp, certify.k_grid(lam0, 96),
                                        ck_source="explicit bound"))
    else:
        certs.append(certify.rate_thm13(lam0, k2, r0, lambda ks: np.ones_like(ks),
                                        ck_source="not needed (k2 = 0)"))
    certs.append(certify.rate_cor14(lam0, k2, r0, b_zero=isinstance(b_rest, ZeroDelay),
                                    symmetric_dirac=spectral.check_dirac_measure(nu)))
    return certs, extra


def format_table(certs) -> str:
    head = f"{'theorem':<8} {'applicable':<10} {'lambda':>12} {'optimizer':>12} {'margin':>12}  c_k source"
    lines = [head, "-" * len(head)]
    for c in certs:
        opt = "-" if c.optimizer is None else f"{c.optimizer:.6g}"
        mar = "-" if c.margin is None else f"{c.margin:.6g}"
        lines.append(f"{c.theorem:<8} {str(c.applicable):<10} {c.lam:>12.6g} {opt:>12} {mar:>12}"
                     f"  {c.ck_source or '-'}")
    return "\n".join(lines)


def cmd_certify(cfg: RunConfig, out_dir=None, echo=print) -> tuple[dict, int]:
    certs, extra = certify_run(cfg)
    echo(format_table(certs))
    ok = any(c.applicable for c in certs)
    best = max((c.lam for c in certs if c.applicable), default=0.0)
    payload = {"certificates": [c.to_dict() for c in certs], "best_rate": best, **extra}
    report = envelope("certify", cfg, payload, "pass" if ok else "fail")
    out = Output(cfg, out_dir)
    out.json("certify.json", report)
    return report, EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# spectral
# ---------------------------------------------------------------------------


def cmd_spectral(cfg: RunConfig, out_dir=None, echo=print) -> tuple[dict, int]:
    nu, _, _ = linear_split(cfg)
    h = cfg.h
    root = spectral.lambda0(nu, tol=cfg.spectral.tol)
    lam0 = root.lambda0
    echo(f"lambda0 = {lam0:.10g} ({root.status})")
    gam = spectral.gamma_solve(nu, cfg.spectral.T, h)
    out = Output(cfg, out_dir)
    out.text("gamma.csv", gam.to_csv())
    payload = {"lambda0": root.to_dict(), "gamma": {"T": gam.T, "h": h, "rows": len(gam.times)}}
    ok = root.status in ("certified", "eigen")
    if lam0 < 0:
        ks = certify.k_grid(lam0, cfg.spectral.ck_points)
        horizon = _ck_horizon(cfg, lam0)
        long = spectral.gamma_solve(nu, horizon, h) if horizon > gam.T else gam
        emp = spectral.ck_empirical(long, ks)
        pp = [spectral.pp_bound(nu, -k, lambda0_value=lam0).bound for k in ks]
        out.csv("ck.csv", ["k", "c_k_empirical", "c_k_bound"], zip(ks, emp, pp))
        lam = cfg.spectral.pp_lambda if cfg.spectral.pp_lambda is not None else lam0 / 2
        pb = spectral.pp_bound(nu, lam, lambda0_value=lam0)
        t = gam.times
        env = pb.bound * np.exp(lam * t)
        norms = gam.norms()
        dominated = bool(np.all(norms[t >= 0] <= env[t >= 0]))
        out.csv("pp_bound.csv", ["t", "gamma_norm", "bound"], zip(t[t >= 0], norms[t >= 0], env[t >= 0]))
        echo(f"explicit bound at lambda={lam:.6g}: {pb.bound:.10g} (rho={pb.rho_lambda:.6g}); "
             f"dominates table: {dominated}")
        payload["pp_bound"] = {**pb.to_dict(), "dominates_table": dominated}
        payload["ck"] = {"k": ks, "empirical": emp, "bound": pp, "horizon": horizon}
        ok = ok and dominated
    report = envelope("spectral", cfg, payload, "pass" if ok else "fail")
    out.json("spectral.json", report)
    return report, EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out_dir=None, echo=print, n_paths: int = 5) -> tuple[dict, int]:
    m = build_model(cfg)
    h, n, T, seed = cfg.h, cfg.n, cfg.sim.T, cfg.seed
    xi = initial_segment(cfg, "xi", h)
    rec = _simulate(m, xi, T, h, seed, min(n, n_paths))
    out = Output(cfg, out_dir)
    out.text("path.csv", rec.to_csv(0))
    final = verify._final_segments(m, xi, T, h, seed, n)[:, -1, :]
    stats = {"mean": final.mean(axis=0), "var": final.var(axis=0, ddof=1) if n > 1 else 0.0,
             "quantiles": {str(q): np.quantile(final, q, axis=0) for q in (0.05, 0.5, 0.95)}}
    echo(f"simulated {n} replicas to T={T:g} with h={h:g}; mean X(T) = {stats['mean']}")
    report = envelope("simulate", cfg, {"T": T, "final_state": stats,
                                        "path_replica0_at_T": rec.states[0, -1]}, "pass")
    out.json("simulate.json", report)
    return report, EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _memory_g(x):
    # a nonlinear read-out of X_t(-r0); any deterministic function works
    return np.sin(x).sum(axis=-1) + 0.5 * x[..., 0] ** 2


def stationary_covariance(cfg: RunConfig, h: float) -> np.ndarray:
    """Covariance of the Euler chain's invariant law for a linear model.

    ``h sum_k Gamma_h(kh) sigma sigma^T Gamma_h(kh)^T`` with the Euler
    fundamental solution on the simulation grid, summed until the terms
    are negligible.
    """
    nu, _, _ = linear_split(cfg)
    lam0 = spectral.lambda0(nu).lambda0
    if lam0 >= 0:
        raise ValueError("no invariant law: the linear part is not stable")
    T = h * math.ceil(min(40.0 / -lam0 + cfg.model.r0, 2000.0) / h)
    gam = spectral.gamma_solve(nu, T, h)
    G = gam.values[gam.m:-1]
    S = build_model(cfg).sigma
    GS = G @ S
    return h * np.einsum("kij,klj->il", GS, GS)


def _ptf_oracle(cfg: RunConfig, m, h: float, v):
    """``P_t f`` for ``f = <v, xi(0)>`` on a linear model: the noise-free Euler flow."""
    det = m.with_sigma(np.zeros((m.d, m.d)))

    def oracle(segs, t):
        out = []
        for lo, size in verify._chunks(segs.shape[0]):
            seg = run_batch(det, [segs[lo:lo + size]], t, h, 0, lo)[0]
            out.append(seg[:, -1, :] @ v)
        return np.concatenate(out)

    return oracle


class _Suite:
    """Lazily shared state for the checks of one ``verify`` run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.m = build_model(cfg)
        self.h, self.n, self.seed = cfg.h, cfg.n, cfg.seed
        self.xi = initial_segment(cfg, "xi", self.h)
        self.eta = initial_segment(cfg, "eta", self.h)
        self._ens = None
        self._rate = None

    @property
    def rate(self) -> float:
        if self._rate is None:
            certs, _ = certify_run(self.cfg)
            self._rate = max((c.lam for c in certs if c.applicable), default=0.0)
        return self._rate

    @property
    def n_inner(self) -> int:
        v = self.cfg.verify.n_inner
        return v if v is not None else max(50, min(200, self.n // 50))

    @property
    def ensemble(self):
        if self._ens is None:
            v = self.cfg.verify
            size = v.ensemble_n if v.ensemble_n is not None else min(self.n, 2000)
            self._ens = verify.sample_invariant(self.m, v.burn_in, default_spacing(self.cfg),
                                                size, self.h, self.seed + 1)
        return self._ens

    def functionals(self, names):
        return [verify.functional(k, self.m.r0, self.m.d) for k in names]

    def oracles(self, names):
        if not is_linear(self.cfg):
            return None
        v = np.full(self.m.d, 1.0 / math.sqrt(self.m.d))
        out = [_ptf_oracle(self.cfg, self.m, self.h, v) if k == "linear" else None for k in names]
        return out if any(o is not None for o in out) else None

    # -- checks -----------------------------------------------------------

    def contraction(self):
        v = self.cfg.verify
        l1 = v.contraction_lambda1
        l2 = None if l1 is None else verify._contraction_params(self.m)[1]
        _, _, cert = verify._contraction_params(self.m, l1, l2)
        T = v.contraction_T or (min(10.0 / cert.lam, 50.0) if cert.lam > 0 else 10.0)
        T = self.h * round(T / self.h)
        return [verify.check_contraction(self.m, self.xi, self.eta, T, self.h, self.n, self.seed,
                                         l1, l2)]

    def exp_moment(self):
        v = self.cfg.verify
        return [verify.check_exp_moment(self.m, self.xi, v.eps_grid, v.t_grid, self.h, self.n,
                                        self.seed, v.moment_functional, v.alpha)]

    def harnack(self):
        v = self.cfg.verify
        fs = self.functionals(v.functionals)
        return [verify.check_harnack(self.m, fs, float(p), v.t, self.xi, self.eta, self.h,
                                     self.n, self.seed) for p in v.p]

    def girsanov_moments(self):
        v = self.cfg.verify
        return [verify.check_girsanov_moments(self.m, self.xi, self.eta, float(v.p[0]), v.t,
                                              self.h, self.n, self.seed)]

    def memory_passthrough(self):
        r0, h = self.m.r0, self.h
        times = [h, h * round(r0 / 2 / h), r0, r0 + h]
        n = min(self.n, 1000)
        subs = [verify.check_memory_passthrough(self.m, _memory_g, self.xi, t, h, n, self.seed)
                for t in times]
        ok = all(s.passed for s in subs)
        return [verify.CheckReport("memory_passthrough", {"t": times, "h": h, "n": n},
                                   [s.estimate for s in subs], 0.0, None, ok,
                                   details={"per_t": [s.to_dict() for s in subs]})]

    def stationarity(self):
        ens = self.ensemble
        if not is_linear(self.cfg):
            return [verify.CheckReport("stationarity", {}, None, None, None, True, "skipped",
                                       details={"reason": "no closed-form invariant law"})]
        cov = stationary_covariance(self.cfg, self.h)
        level = self.cfg.verify.alpha / self.m.d
        rows = []
        for i in range(self.m.d):
            ks, p = verify.ks_endpoint_normal(ens, float(cov[i, i]), i)
            rows.append({"coord": i, "variance": float(cov[i, i]), "ks": ks, "p": p})
        min_p = min(r["p"] for r in rows)
        return [verify.CheckReport("stationarity", {"n_ensemble": len(ens), "alpha": level,
                                                    "burn_in": ens.burn_in},
                                   min_p, level, None, min_p > level, details={"tests": rows})]

    def shift_invariance(self):
        grid = self.cfg.verify.theta_grid
        if grid is None:
            grid = [-self.m.r0 * k / 5 for k in range(1, 6)]
        return [verify.check_shift_invariance(self.ensemble, grid, self.cfg.verify.alpha)]

    def l2_decay(self):
        v = self.cfg.verify
        return [verify.check_l2_decay(self.m, self.ensemble, self.functionals(v.l2_functionals),
                                      v.l2_t_grid, self.h, self.n_inner, self.seed + 2,
                                      rate=self.rate, ptf_oracle=self.oracles(v.l2_functionals))]

    def hyperbound(self):
        v = self.cfg.verify
        return [verify.check_hyperbound(self.m, self.ensemble, self.functionals(v.l2_functionals),
                                        v.hyper_t, self.h, self.n_inner, self.seed + 3,
                                        ptf_oracle=self.oracles(v.l2_functionals))]

    def restart_coupling(self):
        v = self.cfg.verify
        return [verify.check_restart_coupling(self.m, self.xi, v.restart_t1, v.restart_t2, self.h,
                                              self.n, self.seed)]

    def tv_bound(self):
        v = self.cfg.verify
        return [verify.tv_bound_estimate(self.m, self.xi, self.eta, v.tv_t_grid, float(v.p[0]),
                                         v.t, self.h, min(self.n, 20_000), self.seed)]


def _status_ok(rep, allow_inconclusive: bool) -> bool:
    if rep.status in ("skipped", "not applicable"):
        return rep.status == "skipped"
    if rep.status == "inconclusive":
        return allow_inconclusive
    return bool(rep.passed)


def verify_run(cfg: RunConfig, checks=None, echo=print) -> tuple[list, bool]:
    names = list(checks) if checks else list(cfg.verify.checks)
    bad = set(names) - set(ALL_CHECKS)
    if bad:
        raise ConfigError(f"unknown check(s): {', '.join(sorted(bad))}")
    suite = _Suite(cfg)
    reports = []
    for name in names:
        for rep in getattr(suite, name)():
            ok = _status_ok(rep, cfg.verify.allow_inconclusive)
            echo(f"{rep.check:<20} {rep.status:<14} {'ok' if ok else 'FAILED'}")
            reports.append((rep, ok))
    return reports, all(ok for _, ok in reports)


def _curve_rows(curves: dict):
    keys = list(curves)
    cols = [np.asarray(curves[k]) for k in keys]
    return keys, zip(*cols)


def cmd_verify(cfg: RunConfig, out_dir=None, echo=print, checks=None) -> tuple[dict, int]:
    reports, ok = verify_run(cfg, checks, echo)
    out = Output(cfg, out_dir)
    for i, (rep, _) in enumerate(reports):
        if rep.curves:
            keys, rows = _curve_rows(rep.curves)
            out.csv(f"{rep.check}_{i}_curve.csv", keys, rows)
    payload = {"checks": [dict(rep.to_dict(), ok=good) for rep, good in reports],
               "allow_inconclusive": cfg.verify.allow_inconclusive}
    report = envelope("verify", cfg, payload, "pass" if ok else "fail")
    out.json("verify.json", report)
    return report, EXIT_OK if ok else EXIT_FAIL


def cmd_report(cfg: RunConfig, out_dir=None, echo=print, checks=None) -> tuple[dict, int]:
    """Certificates, spectral data and the selected checks in one report."""
    parts, codes = {}, []
    for name, fn in (("certify", cmd_certify), ("spectral", cmd_spectral)):
        rep, code = fn(cfg, out_dir, echo)
        parts[name] = rep["results"]
        codes.append(code)
    rep, code = cmd_verify(cfg, out_dir, echo, checks)
    parts["verify"] = rep["results"]
    codes.append(code)
    status = "pass" if max(codes) == EXIT_OK else "fail"
    report = envelope("report", cfg, parts, status)
    Output(cfg, out_dir).json("report.json", report)
    return report, max(codes)


# ---------------------------------------------------------------------------
# click wiring
# ---------------------------------------------------------------------------


def _load(config: str, seed, budget) -> RunConfig:
    path = Path(config)
    if not path.exists() and not any(s in config for s in "/\\"):
        path = bundled_config(config)
    return load_config(path).with_overrides(seed=seed, budget=budget)


def _common(fn):
    fn = click.option("--config", "config", required=True,
                      help="TOML config file, or the name of a bundled config.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override [sim] seed.")(fn)
    fn = click.option("--out", "out", default=None, help="Output directory.")(fn)
    fn = click.option("--budget", type=click.Choice(sorted(BUDGETS)), default=None,
                      help="Replica count and step size preset.")(fn)
    return fn


def _run(fn, config, seed, out, budget, **kw):
    try:
        cfg = _load(config, seed, budget)
        _, code = fn(cfg, out, click.echo, **kw)
    except (ConfigError, ModelValidationError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    sys.exit(code)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="sddekit")
def main():
    """Rate certificates, simulation and Monte Carlo checks for stochastic delay equations."""


@main.command("certify")
@_common
def certify_cmd(config, seed, out, budget):
    """Print the rate certificates; exit 0 iff one applies."""
    _run(cmd_certify, config, seed, out, budget)


@main.command("spectral")
@_common
def spectral_cmd(config, seed, out, budget):
    """Spectral abscissa, fundamental solution table, c_k table and explicit bound."""
    _run(cmd_spectral, config, seed, out, budget)


@main.command("simulate")
@_common
def simulate_cmd(config, seed, out, budget):
    """Euler-Maruyama paths and final-state statistics."""
    _run(cmd_simulate, config, seed, out, budget)


@main.command("verify")
@_common
@click.option("--check", "checks", multiple=True, type=click.Choice(ALL_CHECKS),
              help="Run only this check (repeatable).")
def verify_cmd(config, seed, out, budget, checks):
    """Run the selected Monte Carlo and pathwise checks."""
    _run(cmd_verify, config, seed, out, budget, checks=checks or None)


@main.command("report")
@_common
@click.option("--check", "checks", multiple=True, type=click.Choice(ALL_CHECKS))
def report_cmd(config, seed, out, budget, checks):
    """certify, spectral and verify combined into report.json."""
    _run(cmd_report, config, seed, out, budget, checks=checks or None)


if __name__ == "__main__":  # pragma: no cover
    main()
