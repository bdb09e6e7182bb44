"""Finite-size numerical checks of gauge identities, bounds and limit trends.

Every check returns ``CheckReport`` objects with an explicit criterion.
Quadrature-backed checks (at most three random couplings) pass iff the
residual is below ``QUAD_TOL``; sampled checks use a ``SIGMAS`` = 4
standard-error margin.  Limit statements are checked as monotone trends
in the system size; a step that breaks the trend is re-examined at a
nearby parameter point and only reported as a failure if it breaks there
too (otherwise the verdict is ``inconclusive``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .disorder_avg import (
    gibbs_sample,
    mcmc_combine,
    mcmc_sample,
    paired_average,
    resolve_engine,
    variance_columns,
    variance_from_columns,
)
from .model import ModelError, ModelParameters, Species, SpinGlass, coupling_scale, nishimori_beta
from .sampler import Schedule, default_ladder
from .stats import jackknife

SIGMAS = 4.0
QUAD_TOL = 1e-8
PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
MU1_SWEEP = (0.4, 0.2, 0.1, 0.05)
NEARBY_FACTOR = 1.1


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else str(x)


@dataclass
class CheckReport:
    """Outcome of one check.

    ``value`` is compared with ``target`` (identities) or ``bound`` (upper
    bounds); ``margin`` is in units of ``stderr`` for sampled checks and an
    absolute residual when ``stderr`` is zero.
    """

    name: str
    value: float
    stderr: float
    verdict: str
    criterion: str
    target: float | None = None
    bound: float | None = None
    margin: float | None = None
    size: int | None = None
    inputs: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_json(self) -> dict:
        return {
            "check": self.name,
            "size": self.size,
            "value": _num(self.value),
            "stderr": _num(self.stderr),
            "target": _num(self.target),
            "bound": _num(self.bound),
            "margin": _num(self.margin),
            "verdict": self.verdict,
            "criterion": self.criterion,
            "inputs": self.inputs,
            "details": self.details,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def report_table(reports: Sequence[CheckReport]) -> str:
    """Plain-text table with columns check, L, value, bound/target, margin_sigma, verdict."""
    head = ("check", "L", "value", "bound/target", "margin_sigma", "verdict")
    rows = [head]
    for r in reports:
        ref = r.bound if r.bound is not None else r.target
        rows.append(
            (
                r.name,
                "" if r.size is None else str(r.size),
                f"{r.value:.6g}",
                "" if ref is None else f"{ref:.6g}",
                "" if r.margin is None else f"{r.margin:.3g}",
                r.verdict,
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def summarize(reports: Sequence[CheckReport]) -> dict:
    counts = {PASS: 0, FAIL: 0, INCONCLUSIVE: 0}
    for r in reports:
        counts[r.verdict] += 1
    return counts


def system_size(system: SpinGlass) -> int:
    """Linear size L for lattices, N for mean-field models."""
    return system.lattice.L if system.params.kind != "mean_field" else system.n_sites


def _inputs(system: SpinGlass, n, seed, engine, **extra) -> dict:
    out = {
        "model": system.label,
        "params": system.params.to_json(),
        "n_sites": system.n_sites,
        "n": n,
        "seed": None if engine == "quadrature" else seed,  # quadrature draws no random numbers
        "engine": engine,
    }
    out.update(extra)
    return out


def _identity_verdict(value: float, se: float, quadrature: bool, target: float = 0.0):
    resid = abs(value - target)
    if quadrature:
        return (PASS if resid <= QUAD_TOL else FAIL), resid, f"|value - target| <= {QUAD_TOL:g}"
    if se == 0:
        return (PASS if resid == 0 else FAIL), 0.0 if resid == 0 else math.inf, "exact: value == target"
    return (PASS if resid <= SIGMAS * se else FAIL), resid / se, f"|value - target| <= {SIGMAS:g} sigma"


def _bound_verdict(value: float, bound: float, se: float, quadrature: bool):
    """Upper-bound check: margin > 0 means satisfied."""
    gap = bound - value
    if quadrature:
        return (PASS if gap >= -QUAD_TOL else FAIL), gap, f"value <= bound + {QUAD_TOL:g}"
    if se == 0:
        return (PASS if gap >= 0 else FAIL), math.inf if gap >= 0 else -math.inf, "value <= bound"
    return (PASS if gap >= -SIGMAS * se else FAIL), gap / se, f"value <= bound + {SIGMAS:g} sigma"


def _require_order(system: SpinGlass, p: int, what: str):
    if p not in system.families:
        raise ModelError(f"{what} needs a p={p} family")


def _active_delta(system: SpinGlass, p: int) -> float:
    _require_order(system, p, "check")
    s = system.params.species_for(p)
    if s.delta <= 0:
        raise ModelError(f"check needs delta_{p} > 0")
    return s.delta


def _coupling_std(system: SpinGlass, p: int) -> float:
    s = system.params.species_for(p)
    return coupling_scale(s, system.params.kind, system.n_sites)[1]


def _delta_eff(system: SpinGlass, p: int) -> float:
    """Coupling standard deviation entering the Gaussian integration by parts."""
    _active_delta(system, p)
    return _coupling_std(system, p)


# ---------------------------------------------------------------- identities


def check_internal_energy_nm(system: SpinGlass, n: int = 10_000, seed: int = 0, engine: str = "auto", workers: int = 1):
    """E<H> at beta_N equals minus the summed mean couplings."""
    if not system.params.on_nishimori():
        raise ModelError("internal-energy identity needs parameters on the Nishimori manifold")
    g = gibbs_sample(system, n, seed, [system.beta], engine, orders=[], two_point=False, workers=workers)
    value, se = g.mean(g[system.beta].energy)
    target = system.nishimori_energy()
    verdict, margin, crit = _identity_verdict(value, se, g.engine == "quadrature", target)
    return CheckReport(
        "internal_energy_nm", value, se, verdict, crit, target=target, margin=margin,
        size=system_size(system), inputs=_inputs(system, g.n, g.seed, g.engine, beta=system.beta),
    )


def check_gauge_identity(
    system: SpinGlass,
    beta: float,
    X: Sequence[int],
    Y: Sequence[int],
    n: int = 10_000,
    seed: int = 0,
    engine: str = "auto",
    workers: int = 1,
) -> list[CheckReport]:
    """Gauge identities linking brackets at beta and at beta_N (three residuals)."""
    beta_n = nishimori_beta(system.params)
    inputs = _inputs(system, n, seed, resolve_engine(system, engine), beta=beta, beta_n=beta_n, X=list(X), Y=list(Y))
    if beta == 0:
        # every residual carries a factor <s_X>_0 or is 1 - 1 for the empty set
        return [
            CheckReport(f"gauge_identity.{r}", 0.0, 0.0, PASS, "beta = 0: residual vanishes identically",
                        target=0.0, margin=0.0, size=system_size(system), inputs=inputs)
            for r in ("r1", "r2", "r3")
        ]
    pa = paired_average(system, beta, beta_n, X, Y, n, seed, engine, workers=workers)
    out = []
    for name, res in pa.residuals.items():
        verdict, margin, crit = _identity_verdict(res.mean, res.std_error, res.engine == "quadrature")
        inputs = dict(inputs, n=res.n_realizations, engine=res.engine)
        out.append(
            CheckReport(
                f"gauge_identity.{name}", res.mean, res.std_error, verdict, crit, target=0.0, margin=margin,
                size=system_size(system), inputs=inputs,
                details={k: [t.mean, t.std_error] for k, t in pa.terms.items()},
            )
        )
    return out


def gauge_foundation(s: float, n_nodes: int = 64) -> float:
    """E tanh(b J) - E tanh(b J)^2 for b J ~ N(s^2, s^2), by Gauss-Hermite quadrature.

    On the Nishimori manifold beta_N * J has mean s^2 and variance s^2 with
    s = beta_N * delta, so the single-bond identity depends on s alone.
    """
    from .quadrature import hermite_rule

    g, w = hermite_rule(n_nodes)
    t = np.tanh(s * s + s * g)
    return float(np.dot(w, t) - np.dot(w, t * t))


# ---------------------------------------------------------------- magnetization


def _field_off(system: SpinGlass) -> bool:
    s = system.params.species_for(1)
    return s.mu == 0 and s.delta == 0


def _mcmc_pair(system, beta, beta_n, names, n, seed, schedule, workers):
    targets = sorted({float(beta), float(beta_n)})
    ladder = default_ladder(max(targets), targets)
    return mcmc_sample(system, n, seed, targets, names, schedule, workers, ladder)


def _sqrt_bound_check(name, system, beta, beta_n, lhs_tag, n, seed, engine, workers, schedule, absolute):
    """Shared machinery for  f(E<A>_beta) <= sqrt(E<A>_beta_N)  with common disorder."""
    engine = resolve_engine(system, engine)

    def fn(x, y):
        lhs = np.abs(x) if absolute else x
        return lhs - np.sqrt(np.maximum(y, 0.0))

    if engine == "mcmc":
        s = _mcmc_pair(system, beta, beta_n, [lhs_tag], n, seed, schedule, workers)
        x, y = s.values[(float(beta), lhs_tag)], s.values[(float(beta_n), lhs_tag)]
        ex, ey = s.errors[(float(beta), lhs_tag)], s.errors[(float(beta_n), lhs_tag)]
        weights = None
        conv = bool(np.all(s.converged[(float(beta), lhs_tag)]) and np.all(s.converged[(float(beta_n), lhs_tag)]))
        n_used = s.n
    else:
        g = gibbs_sample(system, n, seed, [beta, beta_n], engine, orders=[1], two_point=lhs_tag.startswith("m2"), workers=workers)
        pick = (lambda a: a.m2(1)) if lhs_tag.startswith("m2") else (lambda a: a.m(1))
        x, y = pick(g[beta]), pick(g[beta_n])
        ex = ey = None
        weights = g.weights
        conv = True
        n_used = g.n
    diff, se = jackknife(fn, [x, y], weights)
    diff, se = float(diff), float(se)
    Ex = float(np.mean(x) if weights is None else np.dot(weights, x))
    Ey = float(np.mean(y) if weights is None else np.dot(weights, y))
    lhs = abs(Ex) if absolute else Ex
    bound = math.sqrt(max(Ey, 0.0))
    if ex is not None:
        # within-chain errors, first order in the difference
        dy = 0.5 / bound if bound > 0 else 0.0
        sx = np.sign(Ex) if absolute else 1.0
        m_err = math.sqrt(float(np.sum((sx * ex) ** 2 + (dy * ey) ** 2))) / len(x)
        se = math.hypot(se, m_err)
    verdict, margin, crit = _bound_verdict(lhs, bound, se, engine == "quadrature")
    inputs = _inputs(system, n_used, seed, engine, beta=beta, beta_n=beta_n)
    details = {"lhs": Ex, "rhs_argument": Ey, "converged": conv}
    if engine == "mcmc":
        inputs["schedule"] = {"burn_in": schedule.burn_in, "sweeps": schedule.sweeps, "thinning": schedule.thinning}
    return CheckReport(name, lhs, se, verdict, crit, bound=bound, margin=margin, size=system_size(system),
                       inputs=inputs, details=details)


def check_squared_magnetization_bound(
    system: SpinGlass,
    beta: float,
    n: int = 10_000,
    seed: int = 0,
    engine: str = "auto",
    workers: int = 1,
    schedule: Schedule = Schedule(),
) -> CheckReport:
    """E<(m^1)^2>_beta <= sqrt(E<(m^1)^2>_beta_N) without a site field."""
    _require_order(system, 1, "site magnetization")
    _require_order(system, 2, "the squared-magnetization bound")
    if not _field_off(system):
        raise ModelError("squared-magnetization bound needs the site field switched off (mu_1 = delta_1 = 0)")
    beta_n = nishimori_beta(system.params)
    return _sqrt_bound_check("m1_squared_bound", system, beta, beta_n, "m2:1", n, seed, engine, workers, schedule, False)


def with_nm_field(system: SpinGlass, mu1: float) -> SpinGlass:
    """Same model with a site field on the Nishimori ray delta_1 = sqrt(mu_1 / beta_N)."""
    beta_n = nishimori_beta(system.params)
    species = [s for s in system.params.species if s.p != 1]
    species.append(Species(1, math.sqrt(mu1 / beta_n) if mu1 > 0 else 0.0, float(mu1)))
    return system.with_params(replace(system.params, species=tuple(species)))


def check_field_magnetization_bound(
    system: SpinGlass,
    beta: float,
    n: int = 10_000,
    seed: int = 0,
    engine: str = "auto",
    workers: int = 1,
    schedule: Schedule = Schedule(),
    mu1_sweep: Sequence[float] | None = MU1_SWEEP,
) -> CheckReport:
    """|E<m^1>_beta| <= sqrt(E<m^1>_beta_N) for a field on the Nishimori ray.

    The report also carries E<m^1> at beta for each field strength in
    ``mu1_sweep`` (same disorder seed), for trend reporting.
    """
    _require_order(system, 1, "site magnetization")
    s1 = system.params.species_for(1)
    if s1.mu <= 0:
        raise ModelError("spontaneous-magnetization check needs mu_1 > 0")
    beta_n = nishimori_beta(system.params)
    want = math.sqrt(s1.mu / beta_n)
    if abs(s1.delta - want) > 1e-12 * max(1.0, want):
        raise ModelError(f"delta_1 = {s1.delta} is off the Nishimori ray sqrt(mu_1/beta_N) = {want}")
    rep = _sqrt_bound_check("m1_field_bound", system, beta, beta_n, "m:1", n, seed, engine, workers, schedule, True)
    if mu1_sweep:
        table = []
        for mu1 in mu1_sweep:
            sys_mu = with_nm_field(system, mu1)
            eng = resolve_engine(sys_mu, rep.inputs["engine"] if engine != "auto" else "auto")
            if eng == "mcmc":
                smp = mcmc_sample(sys_mu, n, seed, [beta], ["m:1"], schedule, workers)
                mean, se, _, _ = mcmc_combine(smp.values[(float(beta), "m:1")], smp.errors[(float(beta), "m:1")])
            else:
                g = gibbs_sample(sys_mu, n, seed, [beta], eng, orders=[1], two_point=False, workers=workers)
                mean, se = g.mean(g[beta].m(1))
            table.append({"mu1": mu1, "mean": mean, "stderr": se})
        rep.details["mu1_sweep"] = table
    return rep


# ---------------------------------------------------------------- truncated correlations


def _corr_columns(system: SpinGlass, p: int, beta: float, n: int, seed: int, engine: str, workers: int):
    engine = resolve_engine(system, engine)
    if engine == "mcmc":
        raise ValueError("truncated-correlation sums need an enumeration engine")
    g = gibbs_sample(system, n, seed, [beta], engine, orders=[p], workers=workers)
    return g, g[beta].one[p], g[beta].two[p]


def _rows(X, size):
    return np.arange(size) if X is None else np.atleast_1d(np.asarray(X, dtype=np.int64))


def check_truncated_k1(
    system: SpinGlass,
    p: int,
    X: int | Sequence[int] | None = None,
    n: int = 10_000,
    seed: int = 0,
    engine: str = "auto",
    workers: int = 1,
    beta: float | None = None,
) -> CheckReport:
    """sum_Y [E(<s_X s_Y> - <s_X><s_Y>)]^2 <= (beta * delta_p)^-2 for each range X.

    ``X`` indexes ranges of the family (all ranges when None).  The bound
    uses the coupling standard deviation, which for mean-field scaling
    includes the size factor.
    """
    beta = system.beta if beta is None else float(beta)
    sd = _delta_eff(system, p)
    g, a, C = _corr_columns(system, p, beta, n, seed, engine, workers)
    rows = _rows(X, a.shape[1])
    cov = C[:, rows, :] - a[:, rows, None] * a[:, None, :]
    lhs, se = jackknife(lambda c: np.sum(c**2, axis=-1), [cov], g.weights)
    bound = (beta * sd) ** -2 if beta > 0 else math.inf
    return _worst_bound("truncated_k1", system, g, lhs, se, bound, rows, {"beta": beta, "p": p})


def _worst_bound(name, system, g, lhs, se, bound, rows, extra):
    quad = g.engine == "quadrature"
    verdicts = [_bound_verdict(float(v), bound, float(s), quad) for v, s in zip(lhs, se)]
    margins = np.array([m for _, m, _ in verdicts])
    worst = int(np.argmin(margins))
    verdict = PASS if all(v == PASS for v, _, _ in verdicts) else FAIL
    return CheckReport(
        name, float(lhs[worst]), float(se[worst]), verdict, verdicts[worst][2] + " for every X",
        bound=bound, margin=float(margins[worst]), size=system_size(system),
        inputs=_inputs(system, g.n, g.seed, g.engine, **extra),
        details={"X": rows.tolist(), "lhs": lhs.tolist(), "stderr": se.tolist(), "worst_X": int(rows[worst])},
    )


def check_k3_combination(
    system: SpinGlass,
    p: int,
    X: int | Sequence[int] | None = None,
    n: int = 10_000,
    seed: int = 0,
    engine: str = "auto",
    workers: int = 1,
) -> list[CheckReport]:
    """Third-order truncated combination bound and its Nishimori reduction.

    Returns two reports: the bound
    sum_Y [E(C^2 - 4abC + 3a^2b^2)]^2 <= 1.5 (beta_N delta_p)^-6, and the
    agreement of the direct form with the reduced form where C^2 -> C and
    abC -> ab (per X, summed over Y).
    """
    if not system.params.on_nishimori():
        raise ModelError("k=3 combination check needs parameters on the Nishimori manifold")
    beta = system.beta
    sd = _delta_eff(system, p)
    g, a, C = _corr_columns(system, p, beta, n, seed, engine, workers)
    rows = _rows(X, a.shape[1])
    aX, aY, CX = a[:, rows, None], a[:, None, :], C[:, rows, :]
    ab = aX * aY
    direct = CX**2 - 4 * ab * CX + 3 * ab**2
    reduced = CX - 4 * ab + 3 * ab**2
    lhs, se = jackknife(lambda d: np.sum(d**2, axis=-1), [direct], g.weights)
    bound = 1.5 * (beta * sd) ** -6
    rep = _worst_bound("k3_combination", system, g, lhs, se, bound, rows, {"beta": beta, "p": p})

    dval, dse = jackknife(lambda d: np.sum(d, axis=-1), [direct - reduced], g.weights)
    quad = g.engine == "quadrature"
    verdicts = [_identity_verdict(float(v), float(s), quad) for v, s in zip(dval, dse)]
    scores = np.array([m for _, m, _ in verdicts])
    worst = int(np.argmax(scores))
    red = CheckReport(
        "k3_nm_reduction", float(dval[worst]), float(dse[worst]),
        PASS if all(v == PASS for v, _, _ in verdicts) else FAIL, verdicts[worst][2] + " for every X",
        target=0.0, margin=float(scores[worst]), size=system_size(system),
        inputs=_inputs(system, g.n, g.seed, g.engine, beta=beta, p=p),
        details={"X": rows.tolist(), "residual": dval.tolist(), "stderr": dse.tolist()},
    )
    return [rep, red]


# ---------------------------------------------------------------- variances


def check_magnetization_variance_bound(
    system: SpinGlass, p: int, n: int = 10_000, seed: int = 0, engine: str = "auto", workers: int = 1
) -> CheckReport:
    """Thermal variance of m^p at most 1 / (beta * delta_p * sqrt(|B_p|))."""
    sd = _delta_eff(system, p)
    beta = system.beta
    g = gibbs_sample(system, n, seed, [beta], engine, orders=[p], workers=workers)
    a1, a2 = variance_columns(g, f"m:{p}", beta)
    vp = variance_from_columns(system, g.engine, g.seed, f"m:{p}", beta, a1, a2, g.weights)
    bound = 1.0 / (beta * sd * math.sqrt(len(system.families[p]))) if beta > 0 else math.inf
    th = vp.thermal
    verdict, margin, crit = _bound_verdict(th.mean, bound, th.std_error, g.engine == "quadrature")
    return CheckReport(
        f"thermal_var_m{p}_bound", th.mean, th.std_error, verdict, crit, bound=bound, margin=margin,
        size=system_size(system), inputs=_inputs(system, g.n, g.seed, g.engine, beta=beta, p=p),
        details={"total": vp.total.mean, "total_stderr": vp.total.std_error},
    )


def perturb_delta(system: SpinGlass, factor: float = NEARBY_FACTOR) -> SpinGlass:
    """Nearby parameter point: every active delta scaled, mu rescaled to stay on (or off) the manifold alike."""
    species = tuple(
        Species(s.p, s.delta * factor, s.mu * factor**2) if s.active else s for s in system.params.species
    )
    return system.with_params(ModelParameters(system.params.beta, species, system.params.kind))


@dataclass
class TrendPoint:
    size: int
    value: float
    stderr: float
    extras: dict = field(default_factory=dict)


def _step_ok(prev: TrendPoint, cur: TrendPoint) -> tuple[bool, float]:
    """|cur| <= |prev| + 4 sigma_step with sigma_step the two errors in quadrature."""
    sig = math.hypot(prev.stderr, cur.stderr)
    gap = abs(prev.value) - abs(cur.value)
    if sig == 0:
        return gap >= -1e-12 * max(1.0, abs(prev.value)), math.inf if gap >= 0 else -math.inf
    return gap >= -SIGMAS * sig, gap / sig


def trend_verdicts(points: list[TrendPoint], nearby: Callable[[], list[TrendPoint]] | None = None):
    """Per-step verdicts for a non-increasing |value| trend.

    A broken step is re-evaluated on ``nearby()`` (the same sizes at a
    nearby parameter point); it fails only if broken there as well.
    """
    steps = []
    for k in range(1, len(points)):
        ok, margin = _step_ok(points[k - 1], points[k])
        steps.append([PASS if ok else FAIL, margin])
    if nearby is not None and any(v == FAIL for v, _ in steps):
        alt = nearby()
        for k, st in enumerate(steps):
            if st[0] == FAIL:
                ok, _ = _step_ok(alt[k], alt[k + 1])
                st[0] = INCONCLUSIVE if ok else FAIL
    return steps


def _combine(verdicts) -> str:
    if FAIL in verdicts:
        return FAIL
    if INCONCLUSIVE in verdicts:
        return INCONCLUSIVE
    return PASS


def _check_sizes(systems: Sequence[SpinGlass]):
    sizes = [system_size(s) for s in systems]
    if len(sizes) < 2 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"trend checks need at least two strictly increasing sizes, got {sizes}")
    return sizes


def acgg_point(system: SpinGlass, p: int, n: int, seed: int, engine: str = "auto", workers: int = 1) -> TrendPoint:
    """res = E<R12 R13> - (E<R12>)^2 / 2 - E<R12^2> / 2 with a jackknife error."""
    beta = system.beta
    g = gibbs_sample(system, n, seed, [beta], engine, orders=[p], workers=workers)
    R, R2, RR = g[beta].overlap(p)
    val, se = jackknife(lambda r, r2, rr: rr - 0.5 * r * r - 0.5 * r2, [R, R2, RR], g.weights)
    return TrendPoint(system_size(system), float(val), float(se), {"n": g.n, "engine": g.engine})


def acgg_residual(
    systems: Sequence[SpinGlass],
    p: int,
    n: int = 10_000,
    seed: int = 0,
    engine: str = "auto",
    workers: int = 1,
    nearby: bool = True,
) -> list[CheckReport]:
    """Overlap-identity residual per size; each report judges the step from the previous size."""
    _check_sizes(systems)
    pts = [acgg_point(s, p, n, seed, engine, workers) for s in systems]
    alt = (lambda: [acgg_point(perturb_delta(s), p, n, seed, engine, workers) for s in systems]) if nearby else None
    steps = trend_verdicts(pts, alt)
    out = []
    for k, (s, pt) in enumerate(zip(systems, pts)):
        if k == 0:
            verdict, margin, crit = PASS, None, "first size: reference value"
        else:
            verdict, margin = steps[k - 1]
            crit = f"|res(L)| <= |res(L_prev)| + {SIGMAS:g} sigma_step"
        out.append(
            CheckReport(
                "acgg_residual", pt.value, pt.stderr, verdict, crit, target=0.0, margin=margin, size=pt.size,
                inputs=_inputs(s, pt.extras["n"], seed, pt.extras["engine"], p=p),
            )
        )
    return out


def variance_ratio_point(system: SpinGlass, p: int, n: int, seed: int, engine: str = "auto", workers: int = 1):
    """|2 total_var(R) / (3 thermal_var(R)) - 1| with a jackknife error, plus both variances."""
    beta = system.beta
    g = gibbs_sample(system, n, seed, [beta], engine, orders=[p], workers=workers)
    R, R2, _ = g[beta].overlap(p)
    vp = variance_from_columns(system, g.engine, g.seed, f"R:{p}", beta, R, R2, g.weights)

    def dev(r, r2, rr):
        return np.abs(2 * (r2 - r * r) / (3 * (r2 - rr)) - 1)

    val, se = jackknife(dev, [R, R2, R * R], g.weights)
    th, to = vp.thermal, vp.total
    noise = th.mean <= SIGMAS * th.std_error and to.mean <= SIGMAS * to.std_error
    return TrendPoint(
        system_size(system), float(val), float(se),
        {"thermal": th.mean, "thermal_stderr": th.std_error, "total": to.mean, "total_stderr": to.std_error,
         "noise_level": bool(noise), "n": g.n, "engine": g.engine},
    )


def check_variance_ratio(
    systems: Sequence[SpinGlass],
    p: int,
    n: int = 10_000,
    seed: int = 0,
    engine: str = "auto",
    workers: int = 1,
    nearby: bool = True,
) -> CheckReport:
    """Trend of the thermal/total overlap-variance ratio toward 3/2."""
    sizes = _check_sizes(systems)
    for s in systems:
        if not s.params.on_nishimori():
            raise ModelError("variance-ratio check needs parameters on the Nishimori manifold")
    first = systems[0]
    if not any(s.active for s in first.params.species):
        # no disorder: total and thermal variances coincide, the ratio says nothing
        return CheckReport(
            "variance_ratio_trend", float("nan"), float("nan"), INCONCLUSIVE,
            "no random couplings: ratio carries no information", target=0.0,
            inputs=_inputs(first, n, seed, engine, p=p, sizes=sizes),
        )
    pts = [variance_ratio_point(s, p, n, seed, engine, workers) for s in systems]
    seq = [{"size": pt.size, "value": pt.value, "stderr": pt.stderr, **pt.extras} for pt in pts]
    inputs = _inputs(first, pts[0].extras["n"], seed, pts[0].extras["engine"], p=p, sizes=sizes)
    if any(pt.extras["noise_level"] or not math.isfinite(pt.value) for pt in pts):
        return CheckReport(
            "variance_ratio_trend", float("nan"), float("nan"), INCONCLUSIVE,
            "variances at noise level: ratio undefined", target=0.0, inputs=inputs, details={"sequence": seq},
        )
    alt = (lambda: [variance_ratio_point(perturb_delta(s), p, n, seed, engine, workers) for s in systems]) if nearby else None
    steps = trend_verdicts(pts, alt)
    worst = min(range(len(steps)), key=lambda k: steps[k][1])
    for st, item in zip(steps, seq[1:]):
        item["step_verdict"], item["step_margin"] = st[0], _num(st[1])
    return CheckReport(
        "variance_ratio_trend", pts[-1].value, pts[-1].stderr, _combine([v for v, _ in steps]),
        f"|rho(L) - 1| non-increasing within {SIGMAS:g} sigma_step", target=0.0, margin=steps[worst][1],
        size=pts[-1].size, inputs=inputs, details={"sequence": seq},
    )


def thermal_variance_point(system: SpinGlass, tag: str, n: int, seed: int, engine: str = "auto", workers: int = 1,
                           which: str = "thermal") -> TrendPoint:
    beta = system.beta
    p = int(tag.split(":")[1])
    g = gibbs_sample(system, n, seed, [beta], engine, orders=[p], workers=workers)
    a1, a2 = variance_columns(g, tag, beta)
    vp = variance_from_columns(system, g.engine, g.seed, tag, beta, a1, a2, g.weights)
    r = vp.thermal if which == "thermal" else vp.total
    return TrendPoint(system_size(system), r.mean, r.std_error, {"n": g.n, "engine": g.engine})


def check_variance_decay(
    systems: Sequence[SpinGlass],
    tag: str,
    n: int = 10_000,
    seed: int = 0,
    engine: str = "auto",
    workers: int = 1,
    which: str = "thermal",
    nearby: bool = True,
) -> CheckReport:
    """Thermal (or total) variance of m^p / R^p non-increasing in size within 4 sigma per step."""
    sizes = _check_sizes(systems)
    pts = [thermal_variance_point(s, tag, n, seed, engine, workers, which) for s in systems]
    alt = (lambda: [thermal_variance_point(perturb_delta(s), tag, n, seed, engine, workers, which) for s in systems]) if nearby else None
    steps = trend_verdicts(pts, alt)
    worst = min(range(len(steps)), key=lambda k: steps[k][1])
    seq = [{"size": pt.size, "value": pt.value, "stderr": pt.stderr} for pt in pts]
    for st, item in zip(steps, seq[1:]):
        item["step_verdict"], item["step_margin"] = st[0], _num(st[1])
    return CheckReport(
        f"{which}_var_{tag.replace(':', '')}_trend", pts[-1].value, pts[-1].stderr, _combine([v for v, _ in steps]),
        f"variance non-increasing within {SIGMAS:g} sigma_step", margin=steps[worst][1], size=pts[-1].size,
        inputs=_inputs(systems[0], pts[0].extras["n"], seed, pts[0].extras["engine"], tag=tag, sizes=sizes),
        details={"sequence": seq},
    )
