"""Model parameters, Gaussian disorder, Hamiltonian and gauge transformations."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.special import ndtri

from .geometry import (
    MEAN_FIELD,
    MEAN_FIELD_COMPLETE,
    NEAREST_NEIGHBOR,
    RANDOM_FIELD,
    SHORT_RANGE,
    CouplingFamily,
    LatticeSpec,
    build_family,
    build_lattice,
)

NM_RTOL = 1e-12
_FSUM_THRESHOLD = 10_000


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Species:
    p: int
    delta: float
    mu: float

    @property
    def active(self) -> bool:
        return self.delta > 0


@dataclass(frozen=True)
class ModelParameters:
    beta: float
    species: tuple[Species, ...]
    kind: str = SHORT_RANGE

    def __post_init__(self):
        ps = [s.p for s in self.species]
        if len(set(ps)) != len(ps):
            raise ModelError(f"species orders must be distinct, got {ps}")
        for s in self.species:
            if s.p < 1:
                raise ModelError(f"species order must be positive, got {s.p}")
            if s.delta < 0 or s.mu < 0:
                raise ModelError(f"species p={s.p} needs delta >= 0 and mu >= 0")
        if self.beta < 0:
            raise ModelError("beta must be nonnegative")
        object.__setattr__(self, "species", tuple(sorted(self.species, key=lambda s: s.p)))

    @property
    def orders(self) -> tuple[int, ...]:
        return tuple(s.p for s in self.species)

    def species_for(self, p: int) -> Species:
        for s in self.species:
            if s.p == p:
                return s
        raise ModelError(f"no species with p={p}")

    def with_beta(self, beta: float) -> "ModelParameters":
        return replace(self, beta=float(beta))

    def on_nishimori(self) -> bool:
        """True iff beta * delta_p**2 == mu_p for every species.

        Field-off species (delta = mu = 0) satisfy this trivially.
        """
        for s in self.species:
            lhs = self.beta * s.delta**2
            if abs(lhs - s.mu) > NM_RTOL * max(abs(lhs), abs(s.mu)):
                return False
        return True

    def nishimori_beta(self) -> float:
        return nishimori_beta(self)

    def to_json(self) -> dict:
        return {
            "beta": self.beta,
            "kind": self.kind,
            "species": [{"p": s.p, "delta": s.delta, "mu": s.mu} for s in self.species],
        }


def nishimori_beta(params: ModelParameters) -> float:
    """Common ratio mu_p / delta_p**2 over the active species."""
    active = [s for s in params.species if s.active]
    if not active:
        raise ModelError("no species with delta > 0; the Nishimori temperature is undefined")
    ref = active[0]
    beta_n = ref.mu / ref.delta**2
    for s in active[1:]:
        other = s.mu / s.delta**2
        if abs(other - beta_n) > NM_RTOL * max(abs(beta_n), abs(other), 1e-300):
            raise ModelError(
                f"inconsistent Nishimori ratios: p={ref.p} gives {beta_n!r}, p={s.p} gives {other!r}"
            )
    return beta_n


def family_map(families) -> dict[int, CouplingFamily]:
    if isinstance(families, Mapping):
        return dict(sorted(families.items()))
    return {f.p: f for f in sorted(families, key=lambda f: f.p)}


@dataclass(frozen=True)
class DisorderRealization:
    couplings: dict[int, np.ndarray]
    seed: int | None = None
    index: int | None = None

    def __post_init__(self):
        frozen = {}
        for p, J in sorted(self.couplings.items()):
            J = np.array(J, dtype=np.float64)
            J.setflags(write=False)
            frozen[int(p)] = J
        object.__setattr__(self, "couplings", frozen)

    def __getitem__(self, p: int) -> np.ndarray:
        return self.couplings[p]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "index": self.index,
            "species": [{"p": p, "J": J.tolist()} for p, J in self.couplings.items()],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    @classmethod
    def from_json(cls, data: dict) -> "DisorderRealization":
        return cls(
            couplings={int(s["p"]): np.asarray(s["J"], dtype=np.float64) for s in data["species"]},
            seed=data.get("seed"),
            index=data.get("index"),
        )


def coupling_scale(species: Species, kind: str, n_sites: int) -> tuple[float, float]:
    """(mean, standard deviation) of one coupling of this species."""
    if kind == MEAN_FIELD:
        p = species.p
        return n_sites ** (1 - p) * species.mu, n_sites ** ((1 - p) / 2) * species.delta
    return species.mu, species.delta


def _stream_key(seed: int, index: int, p: int) -> np.ndarray:
    return np.random.SeedSequence([int(seed), int(index), int(p)]).generate_state(2, np.uint64)


def _uniform_open(raw: np.ndarray) -> np.ndarray:
    # 53-bit midpoint grid, never 0 or 1
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def standard_normals(seed: int, index: int, p: int, count: int) -> np.ndarray:
    """Standard normals for one species of one realization.

    Draw k comes from output k of a Philox stream keyed by
    (seed, index, p), so it can be regenerated alone via
    :func:`standard_normal_at`.
    """
    raw = np.random.Philox(key=_stream_key(seed, index, p)).random_raw(count)
    return ndtri(_uniform_open(np.asarray(raw, dtype=np.uint64)))


def standard_normal_at(seed: int, index: int, p: int, k: int) -> float:
    bg = np.random.Philox(key=_stream_key(seed, index, p), counter=[k // 4, 0, 0, 0])
    raw = bg.random_raw(k % 4 + 1)[-1:]
    return float(ndtri(_uniform_open(np.asarray(raw, dtype=np.uint64)))[0])


def sample_disorder(params: ModelParameters, families, seed: int, index: int) -> DisorderRealization:
    fams = family_map(families)
    if set(fams) != set(params.orders):
        raise ModelError(f"families {sorted(fams)} do not match species {list(params.orders)}")
    couplings = {}
    for s in params.species:
        fam = fams[s.p]
        mean, std = coupling_scale(s, params.kind, fam.n_sites)
        if std == 0:
            couplings[s.p] = np.full(len(fam), mean)
        else:
            couplings[s.p] = std * standard_normals(seed, index, s.p, len(fam)) + mean
    return DisorderRealization(couplings, seed=int(seed), index=int(index))


def sample_disorder_batch(params: ModelParameters, families, seed: int, indices) -> dict[int, np.ndarray]:
    """Couplings for many realizations at once, ``p -> (n, |B_p|)``.

    Row r equals ``sample_disorder(..., index=indices[r])`` exactly.
    """
    fams = family_map(families)
    indices = list(indices)
    out = {}
    for s in params.species:
        fam = fams[s.p]
        mean, std = coupling_scale(s, params.kind, fam.n_sites)
        if std == 0:
            out[s.p] = np.full((len(indices), len(fam)), mean)
            continue
        raw = np.empty((len(indices), len(fam)), dtype=np.uint64)
        for r, idx in enumerate(indices):
            raw[r] = np.random.Philox(key=_stream_key(seed, idx, s.p)).random_raw(len(fam))
        out[s.p] = std * ndtri(_uniform_open(raw)) + mean
    return out


def range_products(config: np.ndarray, family: CouplingFamily) -> np.ndarray:
    """sigma_X for every range X; works on a single config or a stack."""
    config = np.asarray(config)
    return np.prod(config[..., family.sites], axis=-1)


def hamiltonian(config, disorder: DisorderRealization, families) -> float | np.ndarray:
    """H = -sum_p sum_X J_X sigma_X."""
    fams = family_map(families)
    config = np.asarray(config)
    if config.ndim == 1:
        terms = []
        for p, J in disorder.couplings.items():
            terms.append(J * range_products(config, fams[p]))
        flat = np.concatenate(terms) if terms else np.zeros(0)
        if flat.size > _FSUM_THRESHOLD:
            return -math.fsum(flat)
        return -float(np.sum(flat))
    energy = np.zeros(config.shape[:-1])
    for p, J in disorder.couplings.items():
        energy -= range_products(config, fams[p]) @ J
    return energy


def _check_gauge(tau: np.ndarray, n_sites: int) -> np.ndarray:
    tau = np.asarray(tau)
    if tau.shape != (n_sites,) or not np.all(np.abs(tau) == 1):
        raise ModelError(f"gauge configuration must be a length-{n_sites} vector of +-1")
    return tau


def gauge_transform(disorder: DisorderRealization, tau, families) -> DisorderRealization:
    """J_X -> J_X * tau_X for every range."""
    fams = family_map(families)
    n_sites = next(iter(fams.values())).n_sites
    tau = _check_gauge(tau, n_sites)
    return DisorderRealization(
        {p: J * range_products(tau, fams[p]) for p, J in disorder.couplings.items()}
    )


def gauge_log_weight(disorder: DisorderRealization, tau, params: ModelParameters, families) -> float:
    """sum_p sum_X (mu_p / delta_p**2) J_X tau_X.

    This is log P(J tau) - log P~(J) summed over all couplings.
    """
    fams = family_map(families)
    n_sites = next(iter(fams.values())).n_sites
    tau = _check_gauge(tau, n_sites)
    total = 0.0
    for s in params.species:
        if s.mu == 0:
            continue
        if s.delta == 0:
            raise ModelError(f"species p={s.p} has delta = 0 and mu > 0; its density is degenerate")
        J = disorder.couplings[s.p]
        total += (s.mu / s.delta**2) * float(J @ range_products(tau, fams[s.p]))
    return total


def log_density(J, species: Species, kind: str = SHORT_RANGE, n_sites: int = 1):
    """Log of the Gaussian coupling density."""
    mean, std = coupling_scale(species, kind, n_sites)
    J = np.asarray(J, dtype=np.float64)
    return -((J - mean) ** 2) / (2 * std**2) - 0.5 * math.log(2 * math.pi * std**2)


def log_density_tilde(J, species: Species, kind: str = SHORT_RANGE, n_sites: int = 1):
    """Log of the symmetric companion density (mean folded into the constant)."""
    mean, std = coupling_scale(species, kind, n_sites)
    J = np.asarray(J, dtype=np.float64)
    return -(J**2 + mean**2) / (2 * std**2) - 0.5 * math.log(2 * math.pi * std**2)


@dataclass(frozen=True)
class SpinGlass:
    """A lattice, its coupling families and the disorder parameters."""

    lattice: LatticeSpec
    families: dict[int, CouplingFamily]
    params: ModelParameters
    label: str = field(default="", compare=False)

    def __post_init__(self):
        fams = family_map(self.families)
        if set(fams) != set(self.params.orders):
            raise ModelError(f"families {sorted(fams)} do not match species {list(self.params.orders)}")
        for f in fams.values():
            if f.n_sites != self.lattice.n_sites:
                raise ModelError("family and lattice disagree on the number of sites")
        object.__setattr__(self, "families", fams)

    @property
    def n_sites(self) -> int:
        return self.lattice.n_sites

    @property
    def beta(self) -> float:
        return self.params.beta

    def with_params(self, params: ModelParameters) -> "SpinGlass":
        return replace(self, params=params)

    def with_beta(self, beta: float) -> "SpinGlass":
        return replace(self, params=self.params.with_beta(beta))

    def sample(self, seed: int, index: int) -> DisorderRealization:
        return sample_disorder(self.params, self.families, seed, index)

    def energy(self, config, disorder: DisorderRealization):
        return hamiltonian(config, disorder, self.families)

    def n_couplings(self) -> int:
        return sum(len(f) for f in self.families.values())

    def nishimori_energy(self) -> float:
        """Quenched internal energy on the Nishimori manifold."""
        total = 0.0
        for s in self.params.species:
            mean, _ = coupling_scale(s, self.params.kind, self.n_sites)
            total -= len(self.families[s.p]) * mean
        return total


def _species(field, bond_mu, bond_delta):
    species = [Species(2, float(bond_delta), float(bond_mu))]
    mu1, delta1 = field if field is not None else (0.0, 0.0)
    species.append(Species(1, float(delta1), float(mu1)))
    return species


def edwards_anderson(
    L: int,
    d: int = 2,
    *,
    beta: float,
    mu: float,
    delta: float,
    field: tuple[float, float] | None = None,
) -> SpinGlass:
    """Nearest-neighbour EA model with a (possibly switched-off) site field.

    The p=1 species is always present so the site magnetization has a family;
    ``field=(mu1, delta1)`` switches it on.
    """
    lat = build_lattice(d, L, SHORT_RANGE)
    fams = {1: build_family(lat, RANDOM_FIELD), 2: build_family(lat, NEAREST_NEIGHBOR)}
    params = ModelParameters(beta=float(beta), species=tuple(_species(field, mu, delta)))
    return SpinGlass(lat, fams, params, label=f"EA d={d} L={L}")


def sherrington_kirkpatrick(
    N: int,
    *,
    beta: float,
    mu: float,
    delta: float,
    field: tuple[float, float] | None = None,
) -> SpinGlass:
    lat = build_lattice(1, N, MEAN_FIELD)
    fams = {1: build_family(lat, RANDOM_FIELD), 2: build_family(lat, MEAN_FIELD_COMPLETE, 2)}
    params = ModelParameters(beta=float(beta), species=tuple(_species(field, mu, delta)), kind=MEAN_FIELD)
    return SpinGlass(lat, fams, params, label=f"SK N={N}")


def nishimori_species(beta_n: float, p: int, delta: float) -> Species:
    """A species placed on the Nishimori manifold: mu = beta_N * delta**2."""
    return Species(p, float(delta), float(beta_n * delta**2))
