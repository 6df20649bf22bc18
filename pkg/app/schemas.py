"""
Pydantic schemas for driver specs and experiment configs
"""
import math
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import settings
from app.utils.validators import ArrayValidator


class SpecBase(BaseModel):
    """Fields shared by every driver spec file"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True, arbitrary_types_allowed=True)

    seed: int = Field(default=0, ge=0, lt=2**64)
    T: Optional[float] = Field(default=None, gt=0)
    n: Optional[int] = Field(default=None, ge=1)

    def declared_kappa(self, T: float) -> float:
        """Largest diffusivity of the martingale part on [0, T]."""
        return 0.0


class FiniteEnergySpec(SpecBase):
    kind: Literal["finite_energy"] = "finite_energy"
    hdot_steps: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.0, 0.0)])

    @field_validator("hdot_steps")
    @classmethod
    def _steps(cls, v):
        return ArrayValidator.validate_step_function(v, "hdot_steps")


class BrownianSpec(SpecBase):
    kind: Literal["brownian"] = "brownian"
    kappa: float = Field(default=1.0, ge=0)

    def declared_kappa(self, T: float) -> float:
        return self.kappa


class VariableKappaSpec(SpecBase):
    kind: Literal["variable_kappa"] = "variable_kappa"
    kappa_steps: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.0, 1.0)])

    @field_validator("kappa_steps")
    @classmethod
    def _steps(cls, v):
        pairs = ArrayValidator.validate_step_function(v, "kappa_steps")
        if any(k < 0 for _, k in pairs):
            raise ValueError("kappa(.) must be nonnegative everywhere")
        return pairs

    def declared_kappa(self, T: float) -> float:
        return max(k for s, k in self.kappa_steps if s < T)


class OUSpec(SpecBase):
    kind: Literal["ou"] = "ou"
    lam: float = Field(default=1.0, gt=0, alias="lambda")

    def declared_kappa(self, T: float) -> float:
        return self.lam


class FunctionalSpec(SpecBase):
    kind: Literal["functional"] = "functional"
    F: Literal["t_pow_p", "t_log1p_x2", "linear"] = "linear"
    p: float = Field(default=1.0, gt=0)
    kappa: float = Field(default=1.0, ge=0)
    # library callers may attach a Functional object; never serialized
    custom: Optional[Any] = Field(default=None, exclude=True)

    def declared_kappa(self, T: float) -> float:
        if self.custom is not None:
            return float(self.custom.kappa_bound(T))
        if self.F == "linear":
            return self.kappa
        if self.F == "t_pow_p":
            return T ** (2 * self.p)
        return T ** 2


InnerSpec = Annotated[
    Union[BrownianSpec, VariableKappaSpec, OUSpec, FunctionalSpec],
    Field(discriminator="kind"),
]


class HPerturbedSpec(SpecBase):
    kind: Literal["h_perturbed"] = "h_perturbed"
    inner: InnerSpec
    h: FiniteEnergySpec

    def declared_kappa(self, T: float) -> float:
        return self.inner.declared_kappa(T)


DriverSpec = Annotated[
    Union[FiniteEnergySpec, BrownianSpec, VariableKappaSpec, OUSpec, FunctionalSpec, HPerturbedSpec],
    Field(discriminator="kind"),
]


class FlowConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    scheme: Literal["rk4", "slit"] = Field(default_factory=lambda: settings.FLOW_SCHEME)
    substeps: int = Field(default_factory=lambda: settings.FLOW_SUBSTEPS, ge=1)
    swallow_delta: Optional[float] = Field(default=None, gt=0)
    min_imag_guard: float = Field(default_factory=lambda: settings.MIN_IMAG_GUARD, gt=0)
    slit_switch_ratio: float = Field(default_factory=lambda: settings.SLIT_SWITCH_RATIO, ge=0)
    auto_refine: bool = True
    two_route_tol: float = Field(default=1e-5, gt=0)

    def delta_for(self, dt: float) -> float:
        if self.swallow_delta is not None:
            return self.swallow_delta
        return settings.SWALLOW_DELTA_FACTOR * math.sqrt(dt)


class TraceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    y0: float = Field(default=1.0, gt=0)
    factor: float = Field(default=0.5, gt=0, lt=1)
    k_max: int = Field(default=20, ge=1)
    tol: float = Field(default_factory=lambda: settings.DETERMINISTIC_TOL, gt=0)
    theta: float = Field(default=0.5, gt=0, lt=1)

    def y_levels(self) -> List[float]:
        return [self.y0 * self.factor ** k for k in range(self.k_max + 1)]


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    T: float = Field(default=1.0, gt=0)
    n: int = Field(default=1024, ge=1)


class PartitionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    depth: Optional[int] = Field(default=None, ge=1)
    min_stride: int = Field(default_factory=lambda: settings.MIN_PARTITION_STRIDE, ge=1)
    min_window: Optional[float] = Field(default=None, gt=0)


class Thresholds(BaseModel):
    model_config = ConfigDict(extra="forbid")

    deterministic_slack: float = Field(default_factory=lambda: settings.DETERMINISTIC_SLACK, ge=0)
    stochastic_slack: float = Field(default_factory=lambda: settings.STOCHASTIC_SLACK, ge=0)
    pass_fraction: float = Field(default_factory=lambda: settings.PASS_FRACTION, gt=0, le=1)
    deterministic_tol: float = Field(default_factory=lambda: settings.DETERMINISTIC_TOL, gt=0)
    stochastic_tol: float = Field(default_factory=lambda: settings.STOCHASTIC_TOL, gt=0)
    min_exceedances: int = Field(default_factory=lambda: settings.MIN_TAIL_EXCEEDANCES, ge=1)


ExperimentName = Literal[
    "gen", "solve", "trace", "qv", "represent", "verify-cm", "verify-keyest",
    "verify-key1", "mc-moment", "momentof-f", "tail", "continuity",
]


class ExperimentConfig(BaseModel):
    """A runnable experiment; every default is explicit in the emitted report"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    experiment: ExperimentName
    driver: Optional[DriverSpec] = None
    drivers: List[DriverSpec] = Field(default_factory=list)
    driver_file: Optional[str] = None
    use_corpus: bool = False
    grid: GridConfig = Field(default_factory=GridConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    trace: TraceConfig = Field(default_factory=TraceConfig)
    partitions: PartitionConfig = Field(default_factory=PartitionConfig)
    thresholds: Thresholds = Field(default_factory=Thresholds)
    kappa: Optional[float] = Field(default=None, gt=0)
    out_dir: Optional[str] = None

    seeds: Optional[List[int]] = None
    seed_start: int = Field(default=0, ge=0)
    n_samples: int = Field(default=1, ge=1)

    t_list: List[float] = Field(default_factory=lambda: [1.0])
    y_list: List[float] = Field(default_factory=lambda: [1.0, 0.1, 0.01])
    x_rays: List[float] = Field(default_factory=lambda: [-2.0, 1.0, 2.0])
    points: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.0, 1.0)])

    n_paths: int = Field(default=1000, ge=1)
    alpha: Optional[float] = Field(default=None, gt=0)
    theta: float = Field(default=0.9, gt=0, lt=1)
    b_target: float = Field(default=2.25, gt=2)
    m_levels: Tuple[int, int] = (2, 7)
    holder_alpha: float = Field(default=0.4, gt=0, lt=0.5)
    pvar_eps: float = Field(default=0.1, gt=0)
    perturbation_ladder: List[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16])
    energy_bound: float = Field(default=100.0, gt=0)
    separation: float = Field(default=2.0 ** -6, gt=0)
    refinements: int = Field(default=3, ge=0, le=6)
    plots: bool = True

    @field_validator("y_list")
    @classmethod
    def _heights(cls, v):
        if not v or any(not math.isfinite(y) or y <= 0 for y in v):
            raise ValueError("y_list entries must be finite and > 0")
        return v

    @field_validator("points")
    @classmethod
    def _points(cls, v):
        if any(y <= 0 for _, y in v):
            raise ValueError("points must have Im z > 0")
        return v

    @model_validator(mode="after")
    def _kappa_gate(self):
        if self.experiment in settings.KAPPA_GATED_EXPERIMENTS:
            declared = [self.kappa] if self.kappa is not None else []
            for spec in self.driver_specs():
                declared.append(spec.declared_kappa(spec.T or self.grid.T))
            if any(k >= 2 for k in declared):
                raise ValueError("kappa must be < 2")
        lo, hi = self.m_levels
        if lo < 1 or hi < lo:
            raise ValueError("m_levels must satisfy 1 <= lo <= hi")
        return self

    def driver_specs(self) -> List[Any]:
        specs = [self.driver] if self.driver is not None else []
        return specs + list(self.drivers)

    def seed_list(self, offset: int = 0) -> List[int]:
        base = self.seeds if self.seeds is not None else list(range(self.seed_start, self.seed_start + self.n_samples))
        return [int(s) + offset for s in base]

    def resolved(self) -> Dict[str, Any]:
        """Config with every default filled in, JSON-ready"""
        return self.model_dump(mode="json", by_alias=True)
