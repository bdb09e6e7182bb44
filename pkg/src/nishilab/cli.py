"""Command-line driver: identity suites, scaling studies and phase-proxy sweeps.

Each run writes ``results.jsonl`` (one record per check or estimate, no
timestamps, so reruns are byte-identical), CSV tables and a
``manifest.json`` with the config hash, seed and code version.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from scipy import stats as sps

from . import __version__
from . import verify as V
from .config import ExperimentConfig, build_system, config_hash, load_config, schedule_of
from .disorder_avg import (
    default_workers,
    gibbs_sample,
    quenched_average,
    resolve_engine,
    variance_columns,
    variance_from_columns,
    variance_pair,
)
from .exact import CapacityError
from .geometry import GeometryError
from .model import ModelError, ModelParameters, Species
from .quadrature import QuadratureError
from .sampler import SamplerError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
_USER_ERRORS = (ModelError, GeometryError, CapacityError, QuadratureError, SamplerError, FileNotFoundError)


@dataclass
class Settings:
    """Compute settings after applying command-line and environment overrides."""

    engine: str
    n: int
    seed: int
    workers: int
    engine_forced: bool = False


def resolve_settings(cfg: ExperimentConfig, args=None) -> Settings:
    seed = cfg.compute.seed
    workers = cfg.compute.workers
    env = os.environ.get("NISHILAB_WORKERS")
    if env:
        workers = max(1, int(env))
    if args is not None and args.workers is not None:
        workers = args.workers
    if workers is None:
        workers = default_workers()
    engine = cfg.compute.engine
    forced = args is not None and args.engine is not None
    if forced:
        engine = args.engine
    n = cfg.compute.n if args is None or args.n is None else args.n
    return Settings(engine, n, seed, workers, forced)


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    """Seed overrides are folded into the config so the manifest hash tracks them."""
    if args.seed is not None:
        data = cfg.model_dump(mode="json")
        data["compute"]["seed"] = args.seed
        cfg = ExperimentConfig.model_validate(data)
    return cfg


# ---------------------------------------------------------------- checks


def _engine_for(check, s: Settings) -> str:
    if s.engine_forced or check.engine is None:
        return s.engine
    return check.engine


def run_checks(cfg: ExperimentConfig, s: Settings) -> list[V.CheckReport]:
    reports: list[V.CheckReport] = []
    sched = schedule_of(cfg)
    for chk in cfg.study.checks:
        eng = _engine_for(chk, s)
        n = chk.n or s.n
        common = dict(n=n, seed=s.seed, engine=eng, workers=s.workers)
        system = build_system(cfg.model, chk.size)
        t = chk.type
        if t == "internal_energy_nm":
            reports.append(V.check_internal_energy_nm(system, **common))
        elif t == "gauge_identity":
            for b in chk.betas:
                reports.extend(V.check_gauge_identity(system, b, chk.X, chk.Y, **common))
        elif t == "m1_squared_bound":
            for b in chk.betas:
                reports.append(V.check_squared_magnetization_bound(system, b, schedule=sched, **common))
        elif t == "m1_field_bound":
            sys_f = V.with_nm_field(system, chk.mu1)
            for b in chk.betas:
                reports.append(V.check_field_magnetization_bound(sys_f, b, schedule=sched, mu1_sweep=chk.mu1_sweep, **common))
        elif t == "truncated_k1":
            reports.append(V.check_truncated_k1(system, chk.p, chk.X, **common))
        elif t == "k3_combination":
            reports.extend(V.check_k3_combination(system, chk.p, chk.X, **common))
        elif t == "magnetization_variance_bound":
            for L in chk.sizes or [chk.size]:
                reports.append(V.check_magnetization_variance_bound(build_system(cfg.model, L), chk.p, **common))
        elif t == "acgg_residual":
            systems = [build_system(cfg.model, L) for L in chk.sizes]
            reports.extend(V.acgg_residual(systems, chk.p, **common))
        elif t == "variance_ratio":
            systems = [build_system(cfg.model, L) for L in chk.sizes]
            reports.append(V.check_variance_ratio(systems, chk.p, **common))
        elif t == "variance_decay":
            systems = [build_system(cfg.model, L) for L in chk.sizes]
            reports.append(V.check_variance_decay(systems, chk.observable, which=chk.which, **common))
    return reports


# ---------------------------------------------------------------- scaling


@dataclass
class ScalingStudy:
    """Per-size variances, their power-law fits and field-driven order-parameter proxies."""

    p: int
    sizes: list[int]
    n_ranges: list[int]
    variances: dict[str, list]  # tag -> VariancePair per size
    fits: dict[str, dict]
    proxies: list[dict]
    checks: list[V.CheckReport] = field(default_factory=list)

    def records(self) -> list[dict]:
        out = []
        for tag, pairs in self.variances.items():
            for L, nb, vp in zip(self.sizes, self.n_ranges, pairs):
                for part in (vp.thermal, vp.total):
                    out.append({"record": "estimate", "size": L, "n_ranges": nb, **part.to_json()})
        for name, fit in self.fits.items():
            out.append({"record": "fit", "series": name, **fit})
        for row in self.proxies:
            out.append({"record": "proxy", **row})
        return out

    def table(self) -> list[dict]:
        rows = []
        for k, L in enumerate(self.sizes):
            row = {"size": L, "n_ranges": self.n_ranges[k]}
            for tag, pairs in self.variances.items():
                vp = pairs[k]
                key = tag.replace(":", "")
                row[f"thermal_var_{key}"] = vp.thermal.mean
                row[f"thermal_var_{key}_stderr"] = vp.thermal.std_error
                row[f"total_var_{key}"] = vp.total.mean
                row[f"total_var_{key}_stderr"] = vp.total.std_error
            prox = self.proxies[k]
            row["m_plus_proxy"] = prox["m_plus"]
            row["q_plus_proxy"] = prox["q_plus"]
            rows.append(row)
        return rows


def fit_decay(n_ranges, values) -> dict:
    """Least-squares slope of log(variance) against log|B_p| with a 95% interval."""
    x = np.log(np.asarray(n_ranges, dtype=float))
    y = np.asarray(values, dtype=float)
    if len(x) < 3:
        raise ValueError("the decay fit needs at least 3 points")
    if np.any(y <= 0):
        return {"exponent": None, "stderr": None, "ci95": None, "points": len(x), "note": "non-positive variance"}
    res = sps.linregress(x, np.log(y))
    half = float(sps.t.ppf(0.975, len(x) - 2) * res.stderr)
    return {
        "exponent": float(res.slope),
        "stderr": float(res.stderr),
        "ci95": [float(res.slope) - half, float(res.slope) + half],
        "points": len(x),
    }


def run_scaling(cfg: ExperimentConfig, s: Settings) -> ScalingStudy:
    block = cfg.study.scaling
    p = block.p
    tags = [f"m:{p}", f"R:{p}"]
    variances = {t: [] for t in tags}
    sizes, n_ranges, proxies, bound_checks = [], [], [], []
    mu1 = min(block.mu1) if block.mu1 else None
    for L in block.sizes:
        system = build_system(cfg.model, L)
        eng = resolve_engine(system, s.engine)
        beta = system.beta
        if eng == "mcmc":
            for t in tags:
                variances[t].append(variance_pair(system, t, s.n, s.seed, "mcmc", beta, s.workers, schedule_of(cfg)))
        else:
            g = gibbs_sample(system, s.n, s.seed, [beta], eng, orders=[p], workers=s.workers)
            for t in tags:
                a1, a2 = variance_columns(g, t, beta)
                variances[t].append(variance_from_columns(system, g.engine, g.seed, t, beta, a1, a2, g.weights))
        sizes.append(L)
        n_ranges.append(len(system.families[p]))
        bound_checks.append(_variance_bound_report(system, p, variances[f"m:{p}"][-1], s))
        proxies.append(_proxies(system, L, mu1, s))
    fits = {}
    for t in tags:
        for which in ("thermal", "total"):
            vals = [getattr(vp, which).mean for vp in variances[t]]
            fits[f"{which}_var_{t.replace(':', '')}"] = fit_decay(n_ranges, vals)
    for which in ("thermal", "total"):
        pts = [V.TrendPoint(L, getattr(vp, which).mean, getattr(vp, which).std_error) for L, vp in zip(sizes, variances[f"R:{p}"])]
        steps = V.trend_verdicts(pts)
        worst = min(range(len(steps)), key=lambda k: steps[k][1])
        bound_checks.append(
            V.CheckReport(
                f"{which}_var_R{p}_trend", pts[-1].value, pts[-1].stderr, V._combine([v for v, _ in steps]),
                f"variance non-increasing within {V.SIGMAS:g} sigma_step", margin=steps[worst][1], size=sizes[-1],
                inputs={"sizes": sizes, "n": s.n, "seed": s.seed, "engine": s.engine},
                details={"sequence": [{"size": q.size, "value": q.value, "stderr": q.stderr} for q in pts]},
            )
        )
    return ScalingStudy(p, sizes, n_ranges, variances, fits, proxies, bound_checks)


def _variance_bound_report(system, p, vp, s: Settings) -> V.CheckReport:
    sd = V._coupling_std(system, p)
    beta = system.beta
    bound = 1.0 / (beta * sd * math.sqrt(len(system.families[p]))) if beta > 0 and sd > 0 else math.inf
    th = vp.thermal
    verdict, margin, crit = V._bound_verdict(th.mean, bound, th.std_error, th.engine == "quadrature")
    return V.CheckReport(
        f"thermal_var_m{p}_bound", th.mean, th.std_error, verdict, crit, bound=bound, margin=margin,
        size=V.system_size(system), inputs=V._inputs(system, th.n_realizations, s.seed, th.engine, beta=beta, p=p),
    )


def _proxies(system, L, mu1, s: Settings) -> dict:
    """E<m^1> and E<R^1> at the smallest field on the Nishimori ray (NaN without one)."""
    if mu1 is None or 1 not in system.families:
        return {"size": L, "mu1": mu1, "m_plus": float("nan"), "q_plus": float("nan")}
    sys_f = V.with_nm_field(system, mu1)
    eng = resolve_engine(sys_f, s.engine)
    if eng == "mcmc":
        m = quenched_average(sys_f, "m:1", s.n, s.seed, "mcmc", workers=s.workers)
        q = quenched_average(sys_f, "R:1", s.n, s.seed, "mcmc", workers=s.workers)
        return {"size": L, "mu1": mu1, "m_plus": m.mean, "m_plus_stderr": m.std_error,
                "q_plus": q.mean, "q_plus_stderr": q.std_error}
    g = gibbs_sample(sys_f, s.n, s.seed, [sys_f.beta], eng, orders=[1], two_point=False, workers=s.workers)
    a = g[sys_f.beta].one[1]
    m, m_se = g.mean(a.mean(axis=1))
    q, q_se = g.mean(np.mean(a * a, axis=1))
    return {"size": L, "mu1": mu1, "m_plus": m, "m_plus_stderr": m_se, "q_plus": q, "q_plus_stderr": q_se}


# ---------------------------------------------------------------- phase proxy


PHASE_COLUMNS = ("beta", "mu2", "m1_mean", "m1_stderr", "r1_mean", "r1_stderr", "nishimori_beta", "on_nishimori")


def run_phase_proxy(cfg: ExperimentConfig, s: Settings) -> list[dict]:
    """Grid of (beta, mu2) -> (E<m^1>, E<R^1>) at a fixed small site field."""
    block = cfg.study.phase_proxy
    base = build_system(cfg.model)
    if 1 not in base.families or 2 not in base.families:
        raise ModelError("phase-proxy sweep needs p=1 and p=2 families")
    others = [sp for sp in base.params.species if sp.p not in (1, 2)]
    rows = []
    for mu2 in block.mu2:
        species = tuple(others + [Species(1, block.delta1, block.mu1), Species(2, block.delta2, mu2)])
        system = base.with_params(ModelParameters(base.beta, species, base.params.kind))
        eng = resolve_engine(system, s.engine)
        if eng == "mcmc":
            raise ValueError("phase-proxy sweep needs an enumeration engine")
        g = gibbs_sample(system, s.n, s.seed, block.betas, eng, orders=[1], two_point=False, workers=s.workers)
        beta_nm = mu2 / block.delta2**2
        for beta in block.betas:
            a = g[beta].one[1]
            m, m_se = g.mean(a.mean(axis=1))
            r, r_se = g.mean(np.mean(a * a, axis=1))
            rows.append(
                {
                    "beta": float(beta),
                    "mu2": float(mu2),
                    "m1_mean": m,
                    "m1_stderr": m_se,
                    "r1_mean": r,
                    "r1_stderr": r_se,
                    "nishimori_beta": beta_nm,
                    "on_nishimori": bool(abs(beta - beta_nm) <= 1e-12 * max(1.0, beta_nm)),
                }
            )
    rows.sort(key=lambda r: (r["beta"], r["mu2"]))
    return rows


# ---------------------------------------------------------------- output


def _write_csv(path: Path, rows: list[dict], columns=None):
    if not rows:
        return
    columns = list(columns or rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_cell(r.get(k)) for k in columns})


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def check_rows(reports) -> list[dict]:
    rows = []
    for r in reports:
        rows.append(
            {
                "check": r.name,
                "L": r.size,
                "value": r.value,
                "stderr": r.stderr,
                "bound_or_target": r.bound if r.bound is not None else r.target,
                "margin_sigma": r.margin,
                "verdict": r.verdict,
            }
        )
    return rows


def write_outputs(out_dir: Path, cfg: ExperimentConfig, reports, scaling=None, phase=None) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [{"record": "check", "seq": k, **r.to_json()} for k, r in enumerate(reports)]
    if scaling is not None:
        records += scaling.records()
    if phase is not None:
        records += [{"record": "phase_proxy", **row} for row in phase]
    if "jsonl" in cfg.output.formats:
        with open(out_dir / "results.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(_clean(rec), sort_keys=True) + "\n")
    if "csv" in cfg.output.formats:
        _write_csv(out_dir / "checks.csv", check_rows(reports))
        if scaling is not None:
            _write_csv(out_dir / "scaling.csv", scaling.table())
        if phase is not None:
            _write_csv(out_dir / "phase_proxy.csv", phase, PHASE_COLUMNS)
    base = build_system(cfg.model)
    families = [base.families[p].to_json() for p in sorted(base.families)]
    counts = V.summarize(reports)
    manifest = {
        "name": cfg.name,
        "config_hash": config_hash(cfg, families),
        "seed": cfg.compute.seed,
        "version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": cfg.model_dump(mode="json"),
        "families": families,
        "verdicts": counts,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nishilab", description="Gauge-identity and self-averaging checks for mixed p-spin glasses.")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run every study in the config",
        "verify": "run only the checks",
        "scaling": "run only the scaling study",
        "phase-proxy": "run only the phase-proxy sweep",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True, help="config path or bundled config name")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--engine", choices=("exact", "mcmc", "quadrature", "auto"), default=None)
        sp.add_argument("--n", type=int, default=None, help="realizations per estimate")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--quiet", action="store_true")
    return ap


def _config_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"])
        out.append(f"config error: {loc}: {err['msg']}")
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except ValidationError as exc:
        for line in _config_errors(exc):
            print(line, file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        print(f"config error: {args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.n is not None and args.n < 2:
        print("usage error: --n must be at least 2", file=sys.stderr)
        return EXIT_USAGE
    s = resolve_settings(cfg, args)
    cmd = args.command
    want_checks = cmd in ("run", "verify")
    want_scaling = cmd == "scaling" or (cmd == "run" and cfg.study.scaling is not None)
    want_phase = cmd == "phase-proxy" or (cmd == "run" and cfg.study.phase_proxy is not None)
    if cmd == "scaling" and cfg.study.scaling is None:
        print("config error: study.scaling: block required for the scaling command", file=sys.stderr)
        return EXIT_USAGE
    if cmd == "phase-proxy" and cfg.study.phase_proxy is None:
        print("config error: study.phase_proxy: block required for the phase-proxy command", file=sys.stderr)
        return EXIT_USAGE
    try:
        reports = run_checks(cfg, s) if want_checks else []
        scaling = run_scaling(cfg, s) if want_scaling else None
        phase = run_phase_proxy(cfg, s) if want_phase else None
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if scaling is not None:
        reports = reports + scaling.checks
    out_dir = Path(args.out or cfg.output.directory)
    write_outputs(out_dir, cfg, reports, scaling, phase)
    if not args.quiet:
        if reports:
            print(V.report_table(reports))
        if scaling is not None:
            for name, fit in scaling.fits.items():
                print(f"fit {name}: exponent {fit['exponent']} ci95 {fit['ci95']}")
        counts = V.summarize(reports)
        print(f"{counts['pass']} pass, {counts['fail']} fail, {counts['inconclusive']} inconclusive -> {out_dir}")
    return EXIT_FAIL if any(r.verdict == V.FAIL for r in reports) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
