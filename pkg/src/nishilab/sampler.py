"""Single-site Metropolis with parallel tempering for systems too large to enumerate.

Every chain slot (replica a, rung k) owns a Philox stream keyed by
(seed, realization index, a, k); each sweep consumes exactly 2N uniforms
per slot and n_rungs - 1 swap uniforms per replica ladder, so a run split
into pieces or resumed from a checkpoint reproduces the uninterrupted run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba as nb
import numpy as np

from .exact import _csr
from .model import DisorderRealization, family_map, hamiltonian
from .stats import series_stderr

DRIFT_CHECK = 1000
DRIFT_TOL = 1e-9
_CHAIN_TAG = 0x4D43
_SWAP_TAG = 0x5357


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    burn_in: int = 1000
    sweeps: int = 10000
    thinning: int = 1

    def __post_init__(self):
        if self.sweeps < 1 or self.burn_in < 0 or self.thinning < 1:
            raise ValueError(f"invalid schedule {self}")


def _generator(key_words: Sequence[int]) -> np.random.Generator:
    key = np.random.SeedSequence([int(k) for k in key_words]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def stream_key(seed: int, index: int, replica: int, rung: int) -> tuple[int, ...]:
    return (int(seed), int(index), _CHAIN_TAG, int(replica), int(rung))


def _rng_state_json(rng: np.random.Generator) -> dict:
    st = rng.bit_generator.state
    return {
        "counter": [int(v) for v in st["state"]["counter"]],
        "key": [int(v) for v in st["state"]["key"]],
        "buffer": [int(v) for v in st["buffer"]],
        "buffer_pos": int(st["buffer_pos"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def _rng_from_json(data: dict) -> np.random.Generator:
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(data["counter"], dtype=np.uint64),
            "key": np.array(data["key"], dtype=np.uint64),
        },
        "buffer": np.array(data["buffer"], dtype=np.uint64),
        "buffer_pos": data["buffer_pos"],
        "has_uint32": data["has_uint32"],
        "uinteger": data["uinteger"],
    }
    return np.random.Generator(bg)


@dataclass
class ChainState:
    spins: np.ndarray
    energy: float
    sweep: int
    rng: np.random.Generator

    def to_json(self) -> dict:
        return {
            "spins": [int(s) for s in self.spins],
            "energy": float(self.energy),
            "sweep": int(self.sweep),
            "rng": _rng_state_json(self.rng),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ChainState":
        return cls(
            spins=np.array(data["spins"], dtype=np.int8),
            energy=float(data["energy"]),
            sweep=int(data["sweep"]),
            rng=_rng_from_json(data["rng"]),
        )


def random_chain(disorder: DisorderRealization, families, rng: np.random.Generator) -> ChainState:
    fams = family_map(families)
    n = next(iter(fams.values())).n_sites
    spins = np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8)
    return ChainState(spins, float(hamiltonian(spins, disorder, fams)), 0, rng)


@nb.njit(cache=True)
def _sweep_kernel(
    spins, energies, betas, J, site_ptr, site_ranges, range_ptr, range_sites,
    u, swap_u, n_sweeps, sweep0, do_swaps, record_start, thin,
    rec_spins, rec_energy, rec_pos, attempts, accepts, flips,
):
    n_rep, n_rung, N = spins.shape
    for s in range(n_sweeps):
        for a in range(n_rep):
            for k in range(n_rung):
                b = betas[k]
                for t in range(N):
                    i = int(u[a, k, s, 2 * t] * N)
                    if i >= N:
                        i = N - 1
                    dE = 0.0
                    for q in range(site_ptr[i], site_ptr[i + 1]):
                        r = site_ranges[q]
                        prod = 1
                        for z in range(range_ptr[r], range_ptr[r + 1]):
                            prod *= spins[a, k, range_sites[z]]
                        dE += J[r] * prod
                    dE *= 2.0
                    if dE <= 0.0 or u[a, k, s, 2 * t + 1] < math.exp(-b * dE):
                        spins[a, k, i] = -spins[a, k, i]
                        energies[a, k] += dE
                        flips[a, k] += 1
            if do_swaps and n_rung > 1:
                for k in range((sweep0 + s) % 2, n_rung - 1, 2):
                    attempts[a, k] += 1
                    x = (betas[k] - betas[k + 1]) * (energies[a, k] - energies[a, k + 1])
                    if x >= 0.0 or swap_u[a, s, k] < math.exp(x):
                        for j in range(N):
                            tmp = spins[a, k, j]
                            spins[a, k, j] = spins[a, k + 1, j]
                            spins[a, k + 1, j] = tmp
                        e = energies[a, k]
                        energies[a, k] = energies[a, k + 1]
                        energies[a, k + 1] = e
                        accepts[a, k] += 1
        done = sweep0 + s + 1
        if done > record_start and (done - record_start) % thin == 0:
            rec_spins[rec_pos] = spins
            rec_energy[rec_pos] = energies
            rec_pos += 1
    return rec_pos


@dataclass
class TemperingLadder:
    """Replica ladders: ``states[a][k]`` is replica a at inverse temperature ``betas[k]``."""

    betas: np.ndarray
    states: list[list[ChainState]]
    swap_rngs: list[np.random.Generator]
    swap_attempts: np.ndarray
    swap_accepts: np.ndarray
    provenance: tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if np.any(np.diff(self.betas) <= 0):
            raise SamplerError("ladder betas must be strictly increasing")
        if np.any(self.betas < 0):
            raise SamplerError("ladder betas must be nonnegative")

    @property
    def n_replicas(self) -> int:
        return len(self.states)

    @property
    def n_rungs(self) -> int:
        return len(self.betas)

    @property
    def sweep(self) -> int:
        return self.states[0][0].sweep

    def swap_acceptance(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            rate = self.swap_accepts.sum(axis=0) / self.swap_attempts.sum(axis=0)
        return np.nan_to_num(rate)

    def to_json(self) -> dict:
        return {
            "betas": [float(b) for b in self.betas],
            "provenance": list(self.provenance),
            "states": [[c.to_json() for c in row] for row in self.states],
            "swap_rngs": [_rng_state_json(g) for g in self.swap_rngs],
            "swap_attempts": self.swap_attempts.tolist(),
            "swap_accepts": self.swap_accepts.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "TemperingLadder":
        return cls(
            betas=np.array(data["betas"]),
            states=[[ChainState.from_json(c) for c in row] for row in data["states"]],
            swap_rngs=[_rng_from_json(g) for g in data["swap_rngs"]],
            swap_attempts=np.array(data["swap_attempts"], dtype=np.int64),
            swap_accepts=np.array(data["swap_accepts"], dtype=np.int64),
            provenance=tuple(data["provenance"]),
        )


def new_ladder(disorder, families, betas, seed: int, index: int = 0, n_replicas: int = 2) -> TemperingLadder:
    betas = np.asarray(sorted(float(b) for b in betas))
    keys = [stream_key(seed, index, a, k) for a in range(n_replicas) for k in range(len(betas))]
    assert len(set(keys)) == len(keys), "chain streams must be distinct"
    states = [
        [random_chain(disorder, families, _generator(stream_key(seed, index, a, k))) for k in range(len(betas))]
        for a in range(n_replicas)
    ]
    swaps = [_generator((seed, index, _SWAP_TAG, a)) for a in range(n_replicas)]
    shape = (n_replicas, max(len(betas) - 1, 0))
    return TemperingLadder(
        betas, states, swaps, np.zeros(shape, np.int64), np.zeros(shape, np.int64), (int(seed), int(index))
    )


def default_ladder(beta: float, extra: Iterable[float] = (), rungs: int = 8) -> np.ndarray:
    """Geometric ladder from 0.2*beta to 1.2*beta merged with the requested betas."""
    extra = [float(b) for b in extra]
    if beta <= 0:
        pts = [0.0]
    else:
        pts = list(np.geomspace(0.2 * beta, 1.2 * beta, rungs))
    pts = sorted(set(pts) | set(extra) | {float(beta)})
    merged = []
    for b in pts:
        if merged and abs(b - merged[-1]) <= 1e-12 * max(1.0, b):
            if b in extra or b == beta:
                merged[-1] = b
            continue
        merged.append(b)
    return np.array(merged)


def run_ladder(
    ladder: TemperingLadder,
    disorder: DisorderRealization,
    families,
    n_sweeps: int,
    record_after: int | None = None,
    thinning: int = 1,
    swaps: bool = True,
):
    """Advance every chain by ``n_sweeps``; returns recorded (spins, energies).

    Recording starts once the ladder has completed ``record_after`` sweeps
    in total (defaults to recording nothing).
    """
    fams = family_map(families)
    n = next(iter(fams.values())).n_sites
    csr = _csr(fams, n)
    J = np.concatenate([np.asarray(disorder[p], dtype=np.float64) for p in fams])
    n_rep, n_rung = ladder.n_replicas, ladder.n_rungs
    spins = np.stack([np.stack([c.spins for c in row]) for row in ladder.states]).astype(np.int8)
    energies = np.array([[c.energy for c in row] for row in ladder.states])
    sweep0 = ladder.sweep
    if record_after is None:
        record_after = sweep0 + n_sweeps
    first = max(record_after, sweep0)
    n_rec = max(0, (sweep0 + n_sweeps - record_after) // thinning - (first - record_after) // thinning)
    rec_spins = np.empty((n_rec, n_rep, n_rung, n), dtype=np.int8)
    rec_energy = np.empty((n_rec, n_rep, n_rung))
    attempts = np.zeros((n_rep, max(n_rung - 1, 1)), np.int64)
    accepts = np.zeros_like(attempts)
    flips = np.zeros((n_rep, n_rung), np.int64)
    pos = 0
    done = 0
    while done < n_sweeps:
        # chunks end on multiples of DRIFT_CHECK so the guard fires at fixed sweeps
        cur = sweep0 + done
        chunk = min(n_sweeps - done, DRIFT_CHECK - cur % DRIFT_CHECK)
        u = np.empty((n_rep, n_rung, chunk, 2 * n))
        for a in range(n_rep):
            for k in range(n_rung):
                u[a, k] = ladder.states[a][k].rng.random((chunk, 2 * n))
        swap_u = np.empty((n_rep, chunk, max(n_rung - 1, 1)))
        for a in range(n_rep):
            if n_rung > 1:
                swap_u[a] = ladder.swap_rngs[a].random((chunk, n_rung - 1))
        pos = _sweep_kernel(
            spins, energies, ladder.betas, J, *csr, u, swap_u, chunk, cur, swaps,
            record_after, thinning, rec_spins, rec_energy, pos, attempts, accepts, flips,
        )
        done += chunk
        if (sweep0 + done) % DRIFT_CHECK == 0 or done == n_sweeps:
            exact_e = hamiltonian(spins.reshape(-1, n), disorder, fams).reshape(n_rep, n_rung)
            drift = np.max(np.abs(exact_e - energies) / np.maximum(1.0, np.abs(exact_e)))
            if drift > DRIFT_TOL:
                raise SamplerError(f"energy drift {drift:.3g} exceeds {DRIFT_TOL}")
            energies = exact_e
    for a in range(n_rep):
        for k in range(n_rung):
            st = ladder.states[a][k]
            st.spins = spins[a, k].copy()
            st.energy = float(energies[a, k])
            st.sweep = sweep0 + n_sweeps
    if n_rung > 1:
        ladder.swap_attempts += attempts
        ladder.swap_accepts += accepts
    return rec_spins[:pos], rec_energy[:pos]


def metropolis_sweep(state: ChainState, disorder: DisorderRealization, families, beta: float) -> ChainState:
    """One sweep of N random-site Metropolis proposals on a single chain."""
    new = ChainState(state.spins.copy(), state.energy, state.sweep, state.rng)
    ladder = TemperingLadder(
        np.array([beta]), [[new]], [], np.zeros((1, 0), np.int64), np.zeros((1, 0), np.int64)
    )
    run_ladder(ladder, disorder, families, 1, swaps=False)
    return new


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True)
class Observable:
    kind: str
    p: int = 0
    sites: tuple[int, ...] = ()

    @property
    def replicas_needed(self) -> int:
        return {"R": 2, "R2": 2, "RR": 3}.get(self.kind, 1)

    @property
    def name(self) -> str:
        if self.kind in ("H", "1"):
            return self.kind
        if self.kind == "corr":
            return "corr:" + ",".join(map(str, self.sites))
        return f"{self.kind}:{self.p}"


_KINDS = ("H", "1", "m", "m2", "R", "R2", "RR", "corr")


def parse_observable(spec: str | Observable) -> Observable:
    """``H``, ``1``, ``m:p``, ``m2:p``, ``R:p``, ``R2:p``, ``RR:p`` or ``corr:i,j,...``."""
    if isinstance(spec, Observable):
        return spec
    head, _, tail = spec.partition(":")
    if head not in _KINDS:
        raise ValueError(f"unknown observable {spec!r}")
    if head in ("H", "1"):
        return Observable(head)
    if head == "corr":
        return Observable("corr", sites=tuple(int(s) for s in tail.split(",") if s != ""))
    return Observable(head, p=int(tail))


def observable_series(obs: Observable, spins: np.ndarray, energy: np.ndarray, families) -> np.ndarray:
    """Time series of an observable for one rung.

    ``spins`` has shape (T, replicas, N); single-replica observables are
    averaged over replicas, overlaps over replica pairs (triples for RR).
    """
    T, n_rep, _ = spins.shape
    if obs.kind == "1":
        return np.ones(T)
    if obs.kind == "H":
        return energy.mean(axis=1)
    if obs.kind == "corr":
        return np.prod(spins[:, :, list(obs.sites)].astype(np.float64), axis=-1).mean(axis=1)
    fam = family_map(families)[obs.p]
    sx = np.prod(spins[:, :, fam.sites].astype(np.float64), axis=-1)  # (T, R, B)
    if obs.kind == "m":
        return sx.mean(axis=-1).mean(axis=1)
    if obs.kind == "m2":
        return (sx.mean(axis=-1) ** 2).mean(axis=1)
    if n_rep < obs.replicas_needed:
        raise SamplerError(f"{obs.name} needs {obs.replicas_needed} replicas, ladder has {n_rep}")
    R = np.einsum("tax,tbx->tab", sx, sx) / sx.shape[-1]
    pairs = [(a, b) for a in range(n_rep) for b in range(a + 1, n_rep)]
    if obs.kind == "R":
        return np.mean([R[:, a, b] for a, b in pairs], axis=0)
    if obs.kind == "R2":
        return np.mean([R[:, a, b] ** 2 for a, b in pairs], axis=0)
    triples = [(a, b, c) for a in range(n_rep) for b in range(n_rep) for c in range(b + 1, n_rep) if a not in (b, c)]
    return np.mean([R[:, a, b] * R[:, a, c] for a, b, c in triples], axis=0)


@dataclass(frozen=True)
class McmcEstimate:
    value: float
    stderr: float
    tau_int: float
    converged: bool


@dataclass
class McmcResult:
    estimates: dict[float, dict[str, McmcEstimate]]
    ladder: TemperingLadder = field(repr=False)

    def __getitem__(self, key):
        beta, name = key
        return self.estimates[float(beta)][parse_observable(name).name]


def estimate(
    disorder: DisorderRealization,
    families,
    ladder_betas,
    observables: Iterable[str | Observable],
    schedule: Schedule = Schedule(),
    seed: int = 0,
    index: int = 0,
    targets: Iterable[float] | None = None,
    n_replicas: int | None = None,
    swaps: bool = True,
) -> McmcResult:
    """Time averages with autocorrelation-corrected errors at the target betas."""
    obs = [parse_observable(o) for o in observables]
    ladder_betas = np.asarray(sorted(float(b) for b in ladder_betas))
    targets = list(ladder_betas) if targets is None else [float(t) for t in targets]
    rung_of = {}
    for t in targets:
        hit = np.nonzero(np.abs(ladder_betas - t) <= 1e-12 * max(1.0, t))[0]
        if not len(hit):
            raise SamplerError(f"beta={t} is not a rung of the ladder {ladder_betas.tolist()}")
        rung_of[t] = int(hit[0])
    need = max([o.replicas_needed for o in obs] + [2])
    n_replicas = need if n_replicas is None else n_replicas
    ladder = new_ladder(disorder, families, ladder_betas, seed, index, n_replicas)
    total = schedule.burn_in + schedule.sweeps
    rec_s, rec_e = run_ladder(ladder, disorder, families, total, schedule.burn_in, schedule.thinning, swaps)
    n_samples = len(rec_s)
    out: dict[float, dict[str, McmcEstimate]] = {}
    for t, k in rung_of.items():
        row = {}
        for o in obs:
            series = observable_series(o, rec_s[:, :, k, :], rec_e[:, :, k], families)
            mean, se, tau = series_stderr(series)
            row[o.name] = McmcEstimate(mean, se, tau, tau <= n_samples / 50)
        out[t] = row
    return McmcResult(out, ladder)
