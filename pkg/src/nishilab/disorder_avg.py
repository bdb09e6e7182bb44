"""Quenched averages over Gaussian disorder.

Realizations are evaluated in fixed chunks of ``TASK_SIZE`` indices, so
the concatenated per-realization arrays (and everything reduced from them)
are identical for any worker count.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import quadrature
from .exact import GibbsArrays, gibbs_arrays, mask_of
from .model import SpinGlass, sample_disorder, sample_disorder_batch
from .sampler import Schedule, default_ladder, estimate, parse_observable
from .stats import jackknife, mean_stderr

ENGINES = ("auto", "exact", "quadrature", "mcmc")
TASK_SIZE = 1024


@dataclass(frozen=True)
class EstimatorResult:
    mean: float
    std_error: float
    n_realizations: int
    engine: str
    seed: int | None
    observable: str = ""
    beta: float | None = None
    params: dict = field(default_factory=dict, compare=False)
    disorder_error: float = 0.0
    mcmc_error: float = 0.0

    def to_json(self) -> dict:
        return {
            "observable": self.observable,
            "beta": self.beta,
            "params": self.params,
            "mean": self.mean,
            "stderr": self.std_error,
            "n": self.n_realizations,
            "engine": self.engine,
            "seed": self.seed,
            "disorder_stderr": self.disorder_error,
            "mcmc_stderr": self.mcmc_error,
        }


@dataclass(frozen=True)
class VariancePair:
    observable: str
    thermal: EstimatorResult
    total: EstimatorResult

    @property
    def combined_error(self) -> float:
        return math.hypot(self.thermal.std_error, self.total.std_error)

    def consistent(self) -> bool:
        tol = 4 * self.combined_error
        return (
            self.total.mean >= self.thermal.mean - tol
            and self.thermal.mean >= -4 * self.thermal.std_error
            and self.total.mean >= -4 * self.total.std_error
        )


def resolve_engine(system: SpinGlass, engine: str) -> str:
    if engine not in ENGINES:
        raise ValueError(f"unknown engine {engine!r}; choose from {ENGINES}")
    if engine == "auto":
        k = quadrature.random_coupling_count(system.params, system.families)
        return "quadrature" if k <= quadrature.MAX_RANDOM_COUPLINGS else "exact"
    return engine


def parallel_map(fn: Callable, tasks: Sequence, workers: int = 1) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def default_workers() -> int:
    env = os.environ.get("NISHILAB_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass
class GibbsSample:
    """Per-realization exact Gibbs data at several betas.

    ``weights`` is set for quadrature nodes and None for sampled disorder.
    """

    system: SpinGlass
    engine: str
    seed: int | None
    arrays: dict[float, GibbsArrays]
    weights: np.ndarray | None

    @property
    def n(self) -> int:
        return len(next(iter(self.arrays.values())).log_z)

    def __getitem__(self, beta: float) -> GibbsArrays:
        return self.arrays[float(beta)]

    def mean(self, x) -> float:
        return mean_stderr(x, self.weights)

    def jackknife(self, fn, columns):
        return jackknife(fn, columns, self.weights)


def _exact_task(args):
    system, seed, start, stop, betas, orders, two_point, extra = args
    J = sample_disorder_batch(system.params, system.families, seed, range(start, stop))
    return gibbs_arrays(J, system.families, betas, orders, two_point, extra)


def gibbs_sample(
    system: SpinGlass,
    n: int,
    seed: int,
    betas: Iterable[float],
    engine: str = "auto",
    orders: Iterable[int] | None = None,
    two_point: bool = True,
    extra_sets: Sequence[Sequence[int]] = (),
    workers: int = 1,
    offset: int = 0,
) -> GibbsSample:
    """Exact Gibbs data for realizations ``offset .. offset + n - 1`` (or quadrature nodes)."""
    engine = resolve_engine(system, engine)
    if engine == "mcmc":
        raise ValueError("gibbs_sample needs an enumeration engine")
    betas = sorted({float(b) for b in betas})
    orders = list(system.families) if orders is None else list(orders)
    extra = [mask_of(x, system.n_sites) for x in extra_sets] or None
    if engine == "quadrature":
        J, w = quadrature.coupling_rule(system.params, system.families)
        parts = gibbs_arrays(J, system.families, betas, orders, two_point, extra)
        return GibbsSample(system, engine, None, dict(zip(betas, parts)), w)
    if n < 2:
        raise ValueError("quenched averages need n >= 2 realizations")
    tasks = [
        (system, seed, s, min(s + TASK_SIZE, offset + n), betas, orders, two_point, extra)
        for s in range(offset, offset + n, TASK_SIZE)
    ]
    chunks = parallel_map(_exact_task, tasks, workers)
    arrays = {b: GibbsArrays.concat([c[i] for c in chunks]) for i, b in enumerate(betas)}
    return GibbsSample(system, engine, seed, arrays, None)


def realization_values(obs, g: GibbsArrays, extra_index: dict | None = None) -> np.ndarray:
    """Per-realization Gibbs value of an observable from exact arrays."""
    o = parse_observable(obs)
    if o.kind == "1":
        return np.ones_like(g.log_z)
    if o.kind == "H":
        return g.energy
    if o.kind == "m":
        return g.m(o.p)
    if o.kind == "m2":
        return g.m2(o.p)
    if o.kind in ("R", "R2", "RR"):
        R, R2, RR = g.overlap(o.p)
        return {"R": R, "R2": R2, "RR": RR}[o.kind]
    if o.kind == "corr":
        return g.extra[:, extra_index[o.sites]]
    raise ValueError(f"unsupported observable {o.name}")


def _mcmc_task(args):
    system, seed, index, ladder, targets, names, schedule = args
    dis = sample_disorder(system.params, system.families, seed, index)
    res = estimate(dis, system.families, ladder, names, schedule, seed=seed, index=index, targets=targets)
    return {(t, nm): (res[t, nm].value, res[t, nm].stderr, res[t, nm].converged) for t in targets for nm in names}


@dataclass
class McmcSample:
    """Per-realization MCMC estimates: ``values[(beta, name)]`` and ``errors[(beta, name)]``."""

    system: SpinGlass
    seed: int
    values: dict
    errors: dict
    converged: dict

    @property
    def n(self) -> int:
        return len(next(iter(self.values.values())))


def mcmc_sample(
    system: SpinGlass,
    n: int,
    seed: int,
    betas: Iterable[float],
    observables: Iterable[str],
    schedule: Schedule = Schedule(),
    workers: int = 1,
    ladder=None,
) -> McmcSample:
    targets = sorted({float(b) for b in betas})
    names = [parse_observable(o).name for o in observables]
    if ladder is None:
        ladder = default_ladder(max(targets), targets)
    tasks = [(system, seed, i, ladder, targets, names, schedule) for i in range(n)]
    rows = parallel_map(_mcmc_task, tasks, workers)
    keys = list(rows[0])
    values = {k: np.array([r[k][0] for r in rows]) for k in keys}
    errors = {k: np.array([r[k][1] for r in rows]) for k in keys}
    conv = {k: np.array([r[k][2] for r in rows]) for k in keys}
    return McmcSample(system, seed, values, errors, conv)


def _result(system, engine, seed, name, beta, n, mean, se, d_err=None, m_err=0.0) -> EstimatorResult:
    return EstimatorResult(
        mean=float(mean),
        std_error=float(se),
        n_realizations=int(n),
        engine=engine,
        seed=seed,
        observable=name,
        beta=None if beta is None else float(beta),
        params=system.params.to_json(),
        disorder_error=float(se if d_err is None else d_err),
        mcmc_error=float(m_err),
    )


def mcmc_combine(values: np.ndarray, errors: np.ndarray) -> tuple[float, float, float, float]:
    """Mean with disorder and within-chain errors added in quadrature."""
    n = len(values)
    mean, d_err = mean_stderr(values)
    m_err = math.sqrt(float(np.sum(errors**2))) / n
    return mean, math.hypot(d_err, m_err), d_err, m_err


def quenched_average(
    system: SpinGlass,
    observable: str,
    n: int,
    seed: int,
    engine: str = "auto",
    beta: float | None = None,
    workers: int = 1,
    schedule: Schedule = Schedule(),
) -> EstimatorResult:
    beta = system.beta if beta is None else float(beta)
    o = parse_observable(observable)
    engine = resolve_engine(system, engine)
    if engine == "mcmc":
        s = mcmc_sample(system, n, seed, [beta], [o.name], schedule, workers)
        mean, se, d_err, m_err = mcmc_combine(s.values[(beta, o.name)], s.errors[(beta, o.name)])
        return _result(system, "mcmc", seed, o.name, beta, n, mean, se, d_err, m_err)
    extra = [o.sites] if o.kind == "corr" else ()
    g = gibbs_sample(system, n, seed, [beta], engine, extra_sets=extra, workers=workers)
    vals = realization_values(o, g[beta], {o.sites: 0})
    mean, se = g.mean(vals)
    return _result(system, g.engine, g.seed, o.name, beta, g.n, mean, se)


def variance_columns(sample: GibbsSample, tag: str, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-realization (<A>, <A^2>) for A = m^p or R^p_12."""
    o = parse_observable(tag)
    g = sample[beta]
    if o.kind == "m":
        return g.m(o.p), g.m2(o.p)
    if o.kind == "R":
        R, R2, _ = g.overlap(o.p)
        return R, R2
    raise ValueError(f"variance pair needs m:p or R:p, got {tag!r}")


def variance_from_columns(system, engine, seed, tag, beta, a1, a2, weights=None, a_err=None):
    """thermal = E[<A^2> - <A>^2], total = E<A^2> - (E<A>)^2 with jackknife errors."""
    th, th_se = jackknife(lambda x1, x2, x11: x2 - x11, [a1, a2, a1 * a1], weights)
    to, to_se = jackknife(lambda x1, x2: x2 - x1 * x1, [a1, a2], weights)
    n = len(a1)
    m_th = m_to = 0.0
    if a_err is not None:
        # within-chain errors of <A> and <A^2>, propagated to first order
        e1, e2 = a_err
        m_th = math.sqrt(float(np.sum(e2**2 + (2 * a1 * e1) ** 2))) / n
        m_to = math.sqrt(float(np.sum(e2**2 + (2 * np.mean(a1) * e1) ** 2))) / n
    thermal = _result(system, engine, seed, f"thermal_var[{tag}]", beta, n, th, math.hypot(th_se, m_th), th_se, m_th)
    total = _result(system, engine, seed, f"total_var[{tag}]", beta, n, to, math.hypot(to_se, m_to), to_se, m_to)
    return VariancePair(tag, thermal, total)


def variance_pair(
    system: SpinGlass,
    tag: str,
    n: int,
    seed: int,
    engine: str = "auto",
    beta: float | None = None,
    workers: int = 1,
    schedule: Schedule = Schedule(),
) -> VariancePair:
    beta = system.beta if beta is None else float(beta)
    o = parse_observable(tag)
    if o.kind not in ("m", "R"):
        raise ValueError(f"variance pair needs m:p or R:p, got {tag!r}")
    engine = resolve_engine(system, engine)
    if engine == "mcmc":
        second = f"{'m2' if o.kind == 'm' else 'R2'}:{o.p}"
        s = mcmc_sample(system, n, seed, [beta], [o.name, second], schedule, workers)
        a1, a2 = s.values[(beta, o.name)], s.values[(beta, second)]
        e1, e2 = s.errors[(beta, o.name)], s.errors[(beta, second)]
        return variance_from_columns(system, "mcmc", seed, o.name, beta, a1, a2, None, (e1, e2))
    g = gibbs_sample(system, n, seed, [beta], engine, orders=[o.p], workers=workers)
    a1, a2 = variance_columns(g, o.name, beta)
    return variance_from_columns(system, g.engine, g.seed, o.name, beta, a1, a2, g.weights)


@dataclass(frozen=True)
class PairedAverage:
    """Products of Gibbs brackets at beta and beta_N on common disorder.

    ``terms`` holds the raw products; ``residuals`` the three differences
    r1 = E a - E a aN, r2 = E ab - E ab cN, r3 = E c - E c cN, where
    a = <s_X>, b = <s_Y>, c = <s_X s_Y> at beta and aN, cN at beta_N.
    """

    terms: dict[str, EstimatorResult]
    residuals: dict[str, EstimatorResult]


def _pair_columns(g_beta: GibbsArrays, g_n: GibbsArrays):
    a, b, c = g_beta.extra[:, 0], g_beta.extra[:, 1], g_beta.extra[:, 2]
    aN, cN = g_n.extra[:, 0], g_n.extra[:, 2]
    return {
        "a": a,
        "a*aN": a * aN,
        "ab": a * b,
        "ab*cN": a * b * cN,
        "c": c,
        "c*cN": c * cN,
    }


_RESIDUALS = {"r1": ("a", "a*aN"), "r2": ("ab", "ab*cN"), "r3": ("c", "c*cN")}


def paired_average(
    system: SpinGlass,
    beta: float,
    beta_n: float,
    X: Sequence[int],
    Y: Sequence[int],
    n: int,
    seed: int,
    engine: str = "auto",
    paired: bool = True,
    workers: int = 1,
) -> PairedAverage:
    """Gauge-identity products with common random numbers.

    With ``paired=False`` the second term of each residual is evaluated on
    an independent block of realizations, for variance comparisons.
    """
    X, Y = tuple(X), tuple(Y)
    sets = [X, Y, tuple(sorted(set(X) ^ set(Y)))]
    g = gibbs_sample(system, n, seed, [beta, beta_n], engine, orders=[], two_point=False, extra_sets=sets, workers=workers)
    cols = _pair_columns(g[beta], g[beta_n])
    terms = {k: _result(system, g.engine, g.seed, k, beta, g.n, *g.mean(v)) for k, v in cols.items()}
    residuals = {}
    if paired or g.engine == "quadrature":
        for name, (first, second) in _RESIDUALS.items():
            mean, se = g.mean(cols[first] - cols[second])
            residuals[name] = _result(system, g.engine, g.seed, name, beta, g.n, mean, se)
    else:
        g2 = gibbs_sample(
            system, n, seed, [beta, beta_n], engine, orders=[], two_point=False,
            extra_sets=sets, workers=workers, offset=n,
        )
        cols2 = _pair_columns(g2[beta], g2[beta_n])
        for name, (first, second) in _RESIDUALS.items():
            m1, s1 = g.mean(cols[first])
            m2, s2 = g2.mean(cols2[second])
            residuals[name] = _result(system, g.engine, g.seed, name, beta, g.n, m1 - m2, math.hypot(s1, s2))
    return PairedAverage(terms, residuals)
