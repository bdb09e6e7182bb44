"""Experiment configuration: a strict schema and builders for the systems it describes."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .geometry import (
    MEAN_FIELD,
    MEAN_FIELD_COMPLETE,
    NEAREST_NEIGHBOR,
    PLAQUETTE,
    RANDOM_FIELD,
    SHORT_RANGE,
    build_family,
    build_lattice,
    custom_family,
)
from .model import ModelParameters, Species, SpinGlass
from .sampler import Schedule


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LatticeBlock(Strict):
    kind: Literal["short_range", "mean_field"] = SHORT_RANGE
    d: int = Field(1, ge=1)
    L: int = Field(ge=1)


class FamilyBlock(Strict):
    p: Optional[int] = Field(None, ge=1)
    type: Literal["random_field", "nearest_neighbor", "plaquette", "mean_field_complete", "custom"]
    ranges: Optional[list[list[int]]] = None

    @model_validator(mode="after")
    def _ranges(self):
        if (self.type == "custom") != (self.ranges is not None):
            raise ValueError("'ranges' is required for type 'custom' and only allowed there")
        return self


class SpeciesBlock(Strict):
    p: int = Field(ge=1)
    mu: float = 0.0
    delta: float = Field(0.0, ge=0.0)


class ParamsBlock(Strict):
    beta: float = Field(ge=0.0)
    species: list[SpeciesBlock]


class ModelBlock(Strict):
    lattice: LatticeBlock
    families: list[FamilyBlock]
    params: ParamsBlock


class CheckBase(Strict):
    engine: Optional[Literal["auto", "exact", "quadrature", "mcmc"]] = None
    n: Optional[int] = Field(None, ge=2)
    size: Optional[int] = Field(None, ge=1)


class InternalEnergyCheck(CheckBase):
    type: Literal["internal_energy_nm"]


class GaugeIdentityCheck(CheckBase):
    type: Literal["gauge_identity"]
    betas: list[float]
    X: list[int]
    Y: list[int]


class SquaredMagnetizationCheck(CheckBase):
    type: Literal["m1_squared_bound"]
    betas: list[float]


class FieldMagnetizationCheck(CheckBase):
    type: Literal["m1_field_bound"]
    betas: list[float]
    mu1: float = Field(gt=0.0)
    mu1_sweep: list[float] = [0.4, 0.2, 0.1, 0.05]


class TruncatedK1Check(CheckBase):
    type: Literal["truncated_k1"]
    p: int = 2
    X: Optional[list[int]] = None


class K3Check(CheckBase):
    type: Literal["k3_combination"]
    p: int = 2
    X: Optional[list[int]] = None


class MagnetizationVarianceCheck(CheckBase):
    type: Literal["magnetization_variance_bound"]
    p: int = 2
    sizes: Optional[list[int]] = None


class AcggCheck(CheckBase):
    type: Literal["acgg_residual"]
    p: int = 2
    sizes: list[int]


class VarianceRatioCheck(CheckBase):
    type: Literal["variance_ratio"]
    p: int = 2
    sizes: list[int]


class VarianceDecayCheck(CheckBase):
    type: Literal["variance_decay"]
    observable: str = "R:2"
    which: Literal["thermal", "total"] = "thermal"
    sizes: list[int]


CheckBlock = Annotated[
    Union[
        InternalEnergyCheck,
        GaugeIdentityCheck,
        SquaredMagnetizationCheck,
        FieldMagnetizationCheck,
        TruncatedK1Check,
        K3Check,
        MagnetizationVarianceCheck,
        AcggCheck,
        VarianceRatioCheck,
        VarianceDecayCheck,
    ],
    Field(discriminator="type"),
]


def _increasing(v):
    if v is not None and any(b <= a for a, b in zip(v, v[1:])):
        raise ValueError("sizes must be strictly increasing")
    return v


class ScalingBlock(Strict):
    p: int = 2
    sizes: list[int]
    mu1: list[float] = [0.2, 0.1, 0.05]

    @field_validator("sizes")
    @classmethod
    def _three(cls, v):
        if len(v) < 3:
            raise ValueError("the decay fit needs at least 3 sizes")
        return _increasing(v)


class PhaseProxyBlock(Strict):
    betas: list[float]
    mu2: list[float]
    delta2: float = Field(gt=0.0)
    mu1: float = Field(0.05, ge=0.0)
    delta1: float = Field(0.0, ge=0.0)


class StudyBlock(Strict):
    checks: list[CheckBlock] = []
    scaling: Optional[ScalingBlock] = None
    phase_proxy: Optional[PhaseProxyBlock] = None


class ScheduleBlock(Strict):
    burn_in: int = Field(1000, ge=0)
    sweeps: int = Field(10000, ge=1)
    thinning: int = Field(1, ge=1)


class ComputeBlock(Strict):
    engine: Literal["auto", "exact", "quadrature", "mcmc"] = "auto"
    n: int = Field(10_000, ge=2)
    seed: int = Field(0, ge=0, lt=2**64)
    workers: Optional[int] = Field(None, ge=1)
    schedule: ScheduleBlock = ScheduleBlock()


class OutputBlock(Strict):
    directory: str = "nishilab-out"
    formats: list[Literal["jsonl", "csv"]] = ["jsonl", "csv"]


class ExperimentConfig(Strict):
    name: str = "experiment"
    model: ModelBlock
    study: StudyBlock = StudyBlock()
    compute: ComputeBlock = ComputeBlock()
    output: OutputBlock = OutputBlock()

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a config file; raises json.JSONDecodeError or pydantic.ValidationError."""
    text = Path(resolve_config_path(path)).read_text()
    return ExperimentConfig.model_validate(json.loads(text))


def bundled_configs() -> list[str]:
    root = resources.files("nishilab") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".json"))


def resolve_config_path(path: str | Path) -> Path:
    """A filesystem path, or the name of a bundled config."""
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("nishilab") / "configs" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"no config at {path!s} and no bundled config named {p.name!r}")


_FAMILY_KINDS = {
    "random_field": RANDOM_FIELD,
    "nearest_neighbor": NEAREST_NEIGHBOR,
    "plaquette": PLAQUETTE,
    "mean_field_complete": MEAN_FIELD_COMPLETE,
}


def build_system(model: ModelBlock, size: int | None = None, beta: float | None = None) -> SpinGlass:
    """SpinGlass for the model block, optionally at another linear size or beta."""
    lat_cfg = model.lattice
    L = lat_cfg.L if size is None else size
    lat = build_lattice(lat_cfg.d, L, lat_cfg.kind)
    fams = {}
    for f in model.families:
        if f.type == "custom":
            if size is not None and size != lat_cfg.L:
                raise ValueError("custom families cannot be rebuilt at another size")
            fam = custom_family(lat, f.ranges)
        else:
            fam = build_family(lat, _FAMILY_KINDS[f.type], f.p)
        fams[fam.p] = fam
    species = tuple(Species(s.p, s.delta, s.mu) for s in model.params.species)
    params = ModelParameters(model.params.beta if beta is None else beta, species, lat_cfg.kind)
    label = f"mean-field N={L}" if lat_cfg.kind == MEAN_FIELD else f"d={lat_cfg.d} L={L}"
    return SpinGlass(lat, fams, params, label=label)


def schedule_of(cfg: ExperimentConfig) -> Schedule:
    s = cfg.compute.schedule
    return Schedule(s.burn_in, s.sweeps, s.thinning)


def config_hash(cfg: ExperimentConfig, families_json: list) -> str:
    """Hash over the canonical config (seed included) and the family serializations."""
    h = hashlib.sha256()
    h.update(cfg.canonical().encode())
    h.update(json.dumps(families_json, sort_keys=True, separators=(",", ":")).encode())
    return h.hexdigest()
