"""Exact Gibbs expectations by enumerating all 2**N spin configurations.

Configuration ``c`` is an integer whose bit ``i`` encodes site ``i``
(0 -> +1, 1 -> -1), so sigma_X(c) = (-1)**popcount(c & mask_X).

Two routes share this encoding:

* :class:`ExactGibbs` walks configurations in Gray-code order with numba,
  one realization at a time, up to ``N_MAX`` sites.
* :func:`gibbs_arrays` evaluates many realizations at once with dense
  parity tables; used for the small systems of quenched averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numba as nb
import numpy as np

from .geometry import CouplingFamily
from .model import DisorderRealization, family_map

N_MAX = 24
BATCH_N_MAX = 16
_TABLE_CACHE_ENTRIES = 1 << 26
_BLOCK = 1 << 12
_ARRAY_BUDGET = 1 << 23
_FLOAT_CACHE_ENTRIES = 1 << 23
_RESYNC = 1 << 12


class CapacityError(RuntimeError):
    pass


def _check_capacity(n_sites: int, n_max: int = N_MAX):
    if n_sites > n_max:
        raise CapacityError(
            f"N={n_sites} exceeds the enumeration limit {n_max}; use the sampler module (engine='mcmc')"
        )


def mask_of(sites: Iterable[int], n_sites: int) -> int:
    m = 0
    for s in sites:
        s = int(s)
        if not 0 <= s < n_sites:
            raise IndexError(f"site {s} outside 0..{n_sites - 1}")
        m ^= 1 << s
    return m


def spins_of(configs, n_sites: int) -> np.ndarray:
    """Decode configuration integers into +-1 spin rows."""
    configs = np.asarray(configs, dtype=np.int64)
    bits = (configs[..., None] >> np.arange(n_sites)) & 1
    return (1 - 2 * bits).astype(np.int8)


# ---------------------------------------------------------------------------
# numba kernels

@nb.njit(cache=True)
def _gray_energies(n, site_ptr, site_ranges, range_ptr, range_sites, J):
    n_ranges = J.shape[0]
    nconf = 1 << n
    E = np.empty(nconf)
    par = np.ones(n_ranges)
    e = 0.0
    for r in range(n_ranges):
        e -= J[r]
    E[0] = e
    g = 0
    for k in range(1, nconf):
        i = 0
        while (k >> i) & 1 == 0:
            i += 1
        for t in range(site_ptr[i], site_ptr[i + 1]):
            r = site_ranges[t]
            e += 2.0 * J[r] * par[r]
            par[r] = -par[r]
        g ^= 1 << i
        if k % _RESYNC == 0:
            # exact resync against accumulated rounding
            e = 0.0
            for r in range(n_ranges):
                e -= J[r] * par[r]
        E[g] = e
    return E


@nb.njit(cache=True)
def _kahan_sum(x):
    s = 0.0
    c = 0.0
    for v in x:
        y = v - c
        t = s + y
        c = (t - s) - y
        s = t
    return s


@nb.njit(cache=True)
def _parity_expect(prob, masks):
    out = np.empty(masks.shape[0])
    nconf = prob.shape[0]
    for j in range(masks.shape[0]):
        m = masks[j]
        s = 0.0
        c = 0.0
        for k in range(nconf):
            x = k & m
            x ^= x >> 32
            x ^= x >> 16
            x ^= x >> 8
            x ^= x >> 4
            x ^= x >> 2
            x ^= x >> 1
            v = -prob[k] if (x & 1) else prob[k]
            y = v - c
            t = s + y
            c = (t - s) - y
            s = t
        out[j] = s
    return out


def _csr(families: dict[int, CouplingFamily], n_sites: int):
    range_sites = []
    for fam in families.values():
        range_sites.extend(fam.ranges)
    range_ptr = np.zeros(len(range_sites) + 1, dtype=np.int64)
    flat = []
    for r, sites in enumerate(range_sites):
        flat.extend(sites)
        range_ptr[r + 1] = len(flat)
    by_site = [[] for _ in range(n_sites)]
    for r, sites in enumerate(range_sites):
        for s in sites:
            by_site[s].append(r)
    site_ptr = np.zeros(n_sites + 1, dtype=np.int64)
    site_ranges = []
    for i, rs in enumerate(by_site):
        site_ranges.extend(rs)
        site_ptr[i + 1] = len(site_ranges)
    return site_ptr, np.array(site_ranges, dtype=np.int64), range_ptr, np.array(flat, dtype=np.int64)


def gray_code_energies(disorder: DisorderRealization, families) -> np.ndarray:
    """H(c) for every configuration integer c, via single-flip updates."""
    fams = family_map(families)
    n = next(iter(fams.values())).n_sites
    _check_capacity(n)
    J = np.concatenate([np.asarray(disorder[p], dtype=np.float64) for p in fams])
    return _gray_energies(n, *_csr(fams, n), J)


def _logsumexp(logw: np.ndarray) -> float:
    top = float(np.max(logw))
    return top + math.log(_kahan_sum(np.exp(logw - top)))


# ---------------------------------------------------------------------------
# single realization

class ExactGibbs:
    """Gibbs state of one disorder realization at inverse temperature beta."""

    def __init__(self, disorder: DisorderRealization, families, beta: float, n_max: int = N_MAX, energies=None):
        self.families = family_map(families)
        self.n_sites = next(iter(self.families.values())).n_sites
        _check_capacity(self.n_sites, n_max)
        self.disorder = disorder
        self.beta = float(beta)
        if energies is None:
            energies = gray_code_energies(disorder, self.families)
        self.energies = energies
        logw = -self.beta * self.energies
        self.log_z = _logsumexp(logw)
        self.prob = np.exp(logw - self.log_z)
        self._one: dict[int, np.ndarray] = {}
        self._two: dict[int, np.ndarray] = {}

    @property
    def psi(self) -> float:
        return self.log_z / self.n_sites

    def expect_masks(self, masks) -> np.ndarray:
        masks = np.asarray(masks, dtype=np.int64).reshape(-1)
        return _parity_expect(self.prob, masks)

    def correlation(self, X: Iterable[int]) -> float:
        m = mask_of(X, self.n_sites)
        if m == 0:
            return 1.0  # empty product
        return float(self.expect_masks([m])[0])

    def mean_energy(self) -> float:
        return _kahan_sum(self.prob * self.energies)

    def _family(self, p: int) -> CouplingFamily:
        if p not in self.families:
            raise KeyError(f"no family with p={p}")
        return self.families[p]

    def one_point(self, p: int) -> np.ndarray:
        if p not in self._one:
            self._one[p] = self.expect_masks(self._family(p).masks.astype(np.int64))
        return self._one[p]

    def two_point(self, p: int) -> np.ndarray:
        if p not in self._two:
            masks = self._family(p).masks.astype(np.int64)
            pair = masks[:, None] ^ masks[None, :]
            uniq, inv = np.unique(pair, return_inverse=True)
            self._two[p] = self.expect_masks(uniq)[inv].reshape(pair.shape)
        return self._two[p]

    def magnetization_moment(self, p: int, k: int) -> float:
        if k == 1:
            return float(np.mean(self.one_point(p)))
        if k == 2:
            return float(np.mean(self.two_point(p)))
        raise ValueError("k must be 1 or 2")

    def overlap_moments(self, p: int) -> tuple[float, float, float]:
        a = self.one_point(p)
        C = self.two_point(p)
        return overlap_from_correlations(a, C)

    def truncated_k1(self, X, Y) -> float:
        mx, my = mask_of(X, self.n_sites), mask_of(Y, self.n_sites)
        cxy, cx, cy = self.expect_masks([mx ^ my, mx, my])
        return float(cxy - cx * cy)


def overlap_from_correlations(a: np.ndarray, C: np.ndarray):
    """(<R12>, <R12^2>, <R12 R13>) from one- and two-point functions.

    Works on a single realization (``a`` of shape (B,)) or a stack (n, B).
    """
    B = a.shape[-1]
    R = np.mean(a * a, axis=-1)
    R2 = np.sum(C * C, axis=(-2, -1)) / B**2
    RR = np.einsum("...x,...xy,...y->...", a, C, a) / B**2
    return R, R2, RR


def log_partition(disorder: DisorderRealization, families, beta: float) -> float:
    return ExactGibbs(disorder, families, beta).log_z


def correlation(state: ExactGibbs, X) -> float:
    return state.correlation(X)


def magnetization_moment(state: ExactGibbs, p: int, k: int) -> float:
    return state.magnetization_moment(p, k)


def overlap_moments(state: ExactGibbs, p: int):
    R, R2, RR = state.overlap_moments(p)
    return float(R), float(R2), float(RR)


def truncated_k1(state: ExactGibbs, X, Y) -> float:
    return state.truncated_k1(X, Y)


# ---------------------------------------------------------------------------
# many realizations at once

@lru_cache(maxsize=64)
def _parity_table_cached(n: int, masks_bytes: bytes) -> np.ndarray:
    masks = np.frombuffer(masks_bytes, dtype=np.uint64)
    return _parity_block(np.arange(1 << n, dtype=np.uint64), masks)


def _parity_block(configs: np.ndarray, masks: np.ndarray) -> np.ndarray:
    bits = np.bitwise_count(configs[:, None] & masks[None, :]) & 1
    return (1 - 2 * bits.astype(np.int8)).astype(np.int8)


def parity_table(n: int, masks) -> np.ndarray:
    """+-1 int8 table of sigma_X(c), rows c = 0..2**n-1, one column per mask."""
    masks = np.ascontiguousarray(masks, dtype=np.uint64)
    if (1 << n) * len(masks) <= _TABLE_CACHE_ENTRIES:
        return _parity_table_cached(n, masks.tobytes())
    return _parity_block(np.arange(1 << n, dtype=np.uint64), masks)


@lru_cache(maxsize=16)
def _float_table_cached(n: int, masks_bytes: bytes) -> np.ndarray:
    return _parity_table_cached(n, masks_bytes).astype(np.float64)


def _float_table(n: int, masks: np.ndarray) -> np.ndarray:
    if (1 << n) * len(masks) <= _FLOAT_CACHE_ENTRIES:
        return _float_table_cached(n, masks.tobytes())
    return parity_table(n, masks).astype(np.float64)


def batch_expect(prob: np.ndarray, n: int, masks) -> np.ndarray:
    """Parity expectations for a stack of distributions, shape (r, M)."""
    masks = np.ascontiguousarray(masks, dtype=np.uint64)
    nconf = 1 << n
    if nconf * len(masks) <= _TABLE_CACHE_ENTRIES:
        return prob @ _float_table(n, masks)
    out = np.zeros((prob.shape[0], len(masks)))
    for start in range(0, nconf, _BLOCK):
        cfg = np.arange(start, min(start + _BLOCK, nconf), dtype=np.uint64)
        out += prob[:, start : start + len(cfg)] @ _parity_block(cfg, masks).astype(np.float64)
    return out


def batch_energies(couplings: dict[int, np.ndarray], families) -> np.ndarray:
    """H(c) for each realization row and configuration, shape (r, 2**N)."""
    fams = family_map(families)
    n = next(iter(fams.values())).n_sites
    _check_capacity(n, BATCH_N_MAX)
    rows = next(iter(couplings.values())).shape[0]
    E = np.zeros((rows, 1 << n))
    for p, fam in fams.items():
        J = couplings[p]
        if not np.any(J):
            continue
        E -= J @ _float_table(n, np.ascontiguousarray(fam.masks, dtype=np.uint64)).T
    return E


def boltzmann(E: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalized Gibbs weights and log Z for an energy stack."""
    logw = -beta * E
    top = logw.max(axis=1, keepdims=True)
    w = np.exp(logw - top)
    z = w.sum(axis=1, keepdims=True)
    return w / z, (top + np.log(z))[:, 0]


@dataclass
class GibbsArrays:
    """Per-realization Gibbs data at one beta.

    ``one[p]`` has shape (n, |B_p|); ``two[p]`` has shape (n, |B_p|, |B_p|).
    """

    beta: float
    log_z: np.ndarray
    energy: np.ndarray
    one: dict[int, np.ndarray]
    two: dict[int, np.ndarray]
    extra: np.ndarray | None = None

    def m(self, p):
        return self.one[p].mean(axis=-1)

    def m2(self, p):
        return self.two[p].mean(axis=(-2, -1))

    def overlap(self, p):
        return overlap_from_correlations(self.one[p], self.two[p])

    def subset(self, rows) -> "GibbsArrays":
        return GibbsArrays(
            self.beta,
            self.log_z[rows],
            self.energy[rows],
            {p: v[rows] for p, v in self.one.items()},
            {p: v[rows] for p, v in self.two.items()},
            None if self.extra is None else self.extra[rows],
        )

    @staticmethod
    def concat(parts: list["GibbsArrays"]) -> "GibbsArrays":
        first = parts[0]
        return GibbsArrays(
            first.beta,
            np.concatenate([g.log_z for g in parts]),
            np.concatenate([g.energy for g in parts]),
            {p: np.concatenate([g.one[p] for g in parts]) for p in first.one},
            {p: np.concatenate([g.two[p] for g in parts]) for p in first.two},
            None if first.extra is None else np.concatenate([g.extra for g in parts]),
        )


def _pair_masks(fam: CouplingFamily):
    m = fam.masks
    pair = m[:, None] ^ m[None, :]
    uniq, inv = np.unique(pair, return_inverse=True)
    return uniq, inv.reshape(pair.shape)


def gibbs_arrays(
    couplings: dict[int, np.ndarray],
    families,
    betas: Iterable[float],
    orders: Iterable[int] | None = None,
    two_point: bool = True,
    extra_masks=None,
) -> list[GibbsArrays]:
    """Exact one- and two-point functions for a stack of realizations.

    ``extra_masks`` adds parity expectations for arbitrary site sets.
    Uses dense tables for N <= BATCH_N_MAX and the Gray-code engine per
    realization above that.
    """
    fams = family_map(families)
    n = next(iter(fams.values())).n_sites
    betas = [float(b) for b in betas]
    orders = list(fams) if orders is None else list(orders)
    rows = next(iter(couplings.values())).shape[0]
    extra = None if extra_masks is None else np.asarray(extra_masks, dtype=np.uint64).reshape(-1)
    if n > BATCH_N_MAX:
        return _gibbs_arrays_serial(couplings, fams, betas, orders, two_point, extra)

    chunk = max(1, _ARRAY_BUDGET >> n)
    pairs = {p: _pair_masks(fams[p]) for p in orders} if two_point else {}
    parts: list[list[GibbsArrays]] = [[] for _ in betas]
    for start in range(0, rows, chunk):
        sl = slice(start, min(start + chunk, rows))
        E = batch_energies({p: J[sl] for p, J in couplings.items()}, fams)
        for b, beta in enumerate(betas):
            prob, log_z = boltzmann(E, beta)
            one = {p: batch_expect(prob, n, fams[p].masks) for p in orders}
            two = {}
            for p, (uniq, inv) in pairs.items():
                two[p] = batch_expect(prob, n, uniq)[:, inv]
            ext = None if extra is None else batch_expect(prob, n, extra)
            parts[b].append(GibbsArrays(beta, log_z, np.sum(prob * E, axis=1), one, two, ext))
    return [GibbsArrays.concat(ps) for ps in parts]


def _gibbs_arrays_serial(couplings, fams, betas, orders, two_point, extra):
    rows = next(iter(couplings.values())).shape[0]
    out = []
    per_beta = {b: [] for b in range(len(betas))}
    for r in range(rows):
        dis = DisorderRealization({p: J[r] for p, J in couplings.items()})
        energies = gray_code_energies(dis, fams)
        for b, beta in enumerate(betas):
            st = ExactGibbs(dis, fams, beta, energies=energies)
            one = {p: st.one_point(p)[None] for p in orders}
            two = {p: st.two_point(p)[None] for p in orders} if two_point else {}
            ext = None if extra is None else st.expect_masks(extra.astype(np.int64))[None]
            per_beta[b].append(GibbsArrays(beta, np.array([st.log_z]), np.array([st.mean_energy()]), one, two, ext))
    for b in range(len(betas)):
        out.append(GibbsArrays.concat(per_beta[b]))
    return out
