"""Acceptance criteria 1-12, one summary line each (printed after the run)."""

import json
import math
import time

import numpy as np
import pytest

from nishilab import cli
from nishilab import verify as V
from nishilab.config import build_system, load_config
from nishilab.exact import ExactGibbs
from nishilab.model import edwards_anderson, gauge_transform, sherrington_kirkpatrick
from nishilab.sampler import Schedule, default_ladder, estimate

import conftest
from conftest import chain

pytestmark = pytest.mark.slow


def record(k: int, ok: bool, msg: str):
    conftest.ACCEPTANCE_LINES.append(f"ACCEPTANCE {k:2d} {'PASS' if ok else 'FAIL'}: {msg}")
    assert ok, msg


def _verdicts(reports):
    return "; ".join(f"{r.name}[L={r.size}]={r.verdict}" for r in reports)


_CACHE = {}


def run_bundled(name):
    """Checks and scaling study of a bundled config, computed once per session."""
    if name not in _CACHE:
        cfg = load_config(name)
        s = cli.resolve_settings(cfg)
        t0 = time.perf_counter()
        reports = cli.run_checks(cfg, s)
        scaling = cli.run_scaling(cfg, s) if cfg.study.scaling is not None else None
        _CACHE[name] = (reports, scaling, time.perf_counter() - t0)
    return _CACHE[name]


def test_01_gauge_invariance():
    rng = np.random.default_rng(20240601)
    systems = [
        edwards_anderson(3, beta=0.5, mu=0.5, delta=1.0, field=(0.2, 0.6)),
        chain(8, 1.0, 0.25, 0.5, field=(0.1, 0.3)),
        sherrington_kirkpatrick(10, beta=0.5, mu=0.5, delta=1.0, field=(0.2, 0.6)),
    ]
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(1000):
        sys = systems[k % 3]
        d = sys.sample(7, k)
        s = rng.choice([-1, 1], size=sys.n_sites)
        tau = rng.choice([-1, 1], size=sys.n_sites)
        h0 = sys.energy(s, d)
        h1 = sys.energy(s * tau, gauge_transform(d, tau, sys.families))
        worst = max(worst, abs(h1 - h0) / max(abs(h0), 1e-300))
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-12 and dt < 1.0, f"gauge invariance, 1000 triples, max rel err {worst:.2e}, {dt:.2f}s")


def test_02_internal_energy():
    t0 = time.perf_counter()
    ea = V.check_internal_energy_nm(edwards_anderson(3, beta=0.5, mu=0.5, delta=1.0), n=10_000, seed=1, engine="exact")
    dt = time.perf_counter() - t0
    sk = V.check_internal_energy_nm(sherrington_kirkpatrick(8, beta=0.5, mu=0.5, delta=1.0), n=10_000, seed=1, engine="exact")
    ok = ea.passed and sk.passed and ea.target == -6.0 and abs(sk.target + 28 * 0.5 / 8) < 1e-15 and dt < 60
    record(2, ok, f"NM internal energy EA3x3 {ea.value:.4f}+-{ea.stderr:.4f} vs -6, "
                  f"SK8 {sk.value:.4f}+-{sk.stderr:.4f} vs {sk.target}, {dt:.1f}s")


def test_03_gauge_identities_quadrature():
    cfg = load_config("nm-identities-2site.json")
    system = build_system(cfg.model)
    beta_n = 0.5
    t0 = time.perf_counter()
    reps = []
    for beta in (beta_n / 2, beta_n, 2 * beta_n):
        reps += V.check_gauge_identity(system, beta, [0], [1], engine="quadrature")
    dt = time.perf_counter() - t0
    worst = max(abs(r.value) for r in reps)
    ok = all(r.passed for r in reps) and worst <= 1e-8 and dt < 1.0
    record(3, ok, f"gauge identities by quadrature, 9 residuals, max |r| {worst:.2e}, {dt:.2f}s")


def test_04_gauge_identities_sampled():
    t0 = time.perf_counter()
    reps = V.check_gauge_identity(edwards_anderson(3, beta=0.5, mu=0.5, delta=1.0), 0.7, [0, 1], [1, 2],
                                  n=10_000, seed=1, engine="exact")
    dt = time.perf_counter() - t0
    desc = ", ".join(f"{r.name.split('.')[-1]}={r.value:.2e} ({r.margin:.2f} sigma)" for r in reps)
    record(4, all(r.passed for r in reps) and dt < 120, f"gauge identities EA3x3 beta=0.7 n=1e4: {desc}, {dt:.1f}s")


def test_05_magnetization_bounds():
    small, _, _ = run_bundled("ea-3x3-suite.json")
    big, _, dt = run_bundled("ea-4x4-mcmc.json")
    reps = [r for r in small if r.name.startswith("m1_") and r.inputs["beta"] in (0.75, 1.0)] + big
    assert len(reps) == 8
    desc = "; ".join(f"{r.name} L={r.size} b={r.inputs['beta']} {r.value:.3f}<={r.bound:.3f}" for r in reps)
    record(5, all(r.passed for r in reps), f"magnetization bound chain (4x4 by MCMC, {dt:.0f}s): {desc}")


def test_06_truncated_k1():
    ea = V.check_truncated_k1(edwards_anderson(3, beta=0.5, mu=0.5, delta=1.0), 2, n=10_000, seed=1, engine="exact")
    ch = V.check_truncated_k1(chain(8, 1.0, 0.25, 0.5), 2, n=10_000, seed=1, engine="exact")
    record(6, ea.passed and ch.passed,
           f"k=1 covariance bound EA3x3 {ea.value:.3f}<={ea.bound:.3f}, chain L=8 {ch.value:.3f}<={ch.bound:.3f}")


def test_07_k3_combination():
    bound, red = V.check_k3_combination(edwards_anderson(3, beta=0.5, mu=0.5, delta=1.0), 2, n=10_000, seed=1, engine="exact")
    q_bound, q_red = V.check_k3_combination(build_system(load_config("nm-identities-2site.json").model), 2, engine="quadrature")
    ok = bound.passed and red.passed and q_bound.passed and q_red.passed and abs(q_red.value) <= 1e-8
    record(7, ok, f"k=3 EA3x3 {bound.value:.3f}<={bound.bound:.1f}, reduction {red.margin:.2f} sigma; "
                  f"2-site quadrature reduction |r|={abs(q_red.value):.1e}")


def _scaling_checks(name):
    reports, scaling, _ = run_bundled(name)
    return scaling.checks


def test_08_variance_bounds_and_decay():
    checks = _scaling_checks("ea-scaling.json") + _scaling_checks("sk-scaling.json")
    bounds = [r for r in checks if r.name == "thermal_var_m2_bound"]
    trend = [r for r in checks if r.name == "thermal_var_R2_trend"]
    assert len(bounds) == 7 and len(trend) == 2
    ok = all(r.passed for r in bounds) and all(r.verdict != V.FAIL for r in trend)
    record(8, ok, "thermal_var(m^2) bounds " + _verdicts(bounds) + "; thermal_var(R) decay " + _verdicts(trend))


def test_09_acgg_residual():
    reps = []
    for name in ("ea-scaling.json", "sk-scaling.json"):
        reps += [r for r in run_bundled(name)[0] if r.name == "acgg_residual"]
    closed = []
    for sys in (edwards_anderson(3, beta=0.0, mu=0.0, delta=1.0), sherrington_kirkpatrick(10, beta=0.0, mu=0.0, delta=1.0)):
        pt = V.acgg_point(sys, 2, 100, 0, "exact")
        closed.append(abs(pt.value + 1 / (2 * len(sys.families[2]))))
    ok = all(r.verdict != V.FAIL for r in reps) and max(closed) <= 1e-12
    seq = ", ".join(f"L={r.size}:{r.value:.2e}" for r in reps)
    record(9, ok, f"overlap-identity residual trend {seq}; beta=0 closed form err {max(closed):.1e}")


def test_10_variance_ratio():
    reps = []
    for name in ("ea-scaling.json", "sk-scaling.json"):
        reps += [r for r in run_bundled(name)[0] if r.name == "variance_ratio_trend"]
    seqs = ["/".join(f"{p['value']:.3f}" for p in r.details["sequence"]) for r in reps]
    record(10, all(r.verdict != V.FAIL for r in reps),
           f"|rho-1| trends EA {seqs[0]} ({reps[0].verdict}), SK {seqs[1]} ({reps[1].verdict})")


def test_11_mcmc_validity():
    system = edwards_anderson(3, beta=0.5, mu=0.5, delta=1.0, field=(0.2, math.sqrt(0.4)))
    targets = [0.5, 1.0]
    obs = ["H", "m:1", "m2:1", "m:2", "m2:2", "R:1", "R:2", "R2:2", "RR:2", "corr:0,1", "corr:0,4", "corr:0,1,3,4"]
    ladder = default_ladder(max(targets), targets)
    t0 = time.perf_counter()
    worst, n_cmp, bad = 0.0, 0, []
    for i in range(20):
        d = system.sample(2024, i)
        res = estimate(d, system.families, ladder, obs, Schedule(2000, 40_000), seed=2024, index=i, targets=targets)
        for beta in targets:
            st = ExactGibbs(d, system.families, beta)
            want = {"H": st.mean_energy(), "corr:0,1": st.correlation([0, 1]),
                    "corr:0,4": st.correlation([0, 4]), "corr:0,1,3,4": st.correlation([0, 1, 3, 4])}
            for p in (1, 2):
                R, R2, RR = st.overlap_moments(p)
                want.update({f"m:{p}": st.magnetization_moment(p, 1), f"m2:{p}": st.magnetization_moment(p, 2),
                             f"R:{p}": R, f"R2:{p}": R2, f"RR:{p}": RR})
            for name in obs:
                e = res[beta, name]
                z = abs(e.value - want[name]) / e.stderr if e.stderr > 0 else (0.0 if e.value == want[name] else math.inf)
                n_cmp += 1
                worst = max(worst, z)
                if z > 4:
                    bad.append((i, beta, name, round(z, 2)))
    dt = time.perf_counter() - t0
    record(11, not bad and dt < 600,
           f"tempering vs enumeration, {n_cmp} comparisons, max |z| {worst:.2f}, outliers {bad}, {dt:.0f}s")


def _run_cli(tmp_path, name, tag, *extra):
    out = tmp_path / f"{name}-{tag}"
    code = cli.main(["run", "--config", name, "--out", str(out), "--quiet", *extra])
    return code, (out / "results.jsonl").read_bytes()


def test_12_reproducibility(tmp_path):
    same = {}
    for name in ("nm-identities-2site.json", "phase-proxy.json", "ea-3x3-suite.json"):
        c1, a = _run_cli(tmp_path, name, "a")
        c2, b = _run_cli(tmp_path, name, "b")
        same[name] = a == b and c1 == c2
    _, a = _run_cli(tmp_path, "ea-3x3-suite.json", "a2")
    _, c = _run_cli(tmp_path, "ea-3x3-suite.json", "c", "--seed", "77")
    ra = [json.loads(l) for l in a.decode().splitlines()]
    rc = [json.loads(l) for l in c.decode().splitlines()]
    values_differ = [r["value"] for r in ra] != [r["value"] for r in rc]
    verdicts_same = [r["verdict"] for r in ra] == [r["verdict"] for r in rc]
    ok = all(same.values()) and values_differ and verdicts_same
    record(12, ok, f"byte-identical reruns {same}; seed change alters values={values_differ}, keeps verdicts={verdicts_same}")
