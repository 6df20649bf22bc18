"""
Domain records for loewner-lab

Every record is immutable after construction: dataclasses are frozen and the
numpy arrays they hold are copied and flagged read-only, so records can be
shared freely between worker threads.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

GRID_TOL = 1e-9


def frozen_array(values: Any, dtype: Any = float) -> np.ndarray:
    """Copy ``values`` into a read-only numpy array."""
    arr = np.array(values, dtype=dtype)
    arr.flags.writeable = False
    return arr


def jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays, complex numbers and enums for json.dump."""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [jsonable(v) for v in value.tolist()]
    if isinstance(value, (complex, np.complexfloating)):
        return {"re": jsonable(float(value.real)), "im": jsonable(float(value.imag))}
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


class Interpolation(str, Enum):
    LINEAR = "piecewise-linear"
    MIDPOINT = "piecewise-constant-midpoint"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i*T/n on [0, T]."""
    T: float
    n: int

    def __post_init__(self):
        if not (isinstance(self.T, (int, float)) and math.isfinite(self.T) and self.T > 0):
            raise ValueError(f"horizon T must be a positive finite number, got {self.T}")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"steps n must be a positive integer, got {self.n}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n", int(self.n))

    @property
    def dt(self) -> float:
        return self.T / self.n

    @cached_property
    def points(self) -> np.ndarray:
        pts = np.linspace(0.0, self.T, self.n + 1)
        pts.flags.writeable = False
        return pts

    def index_of(self, t: float) -> int:
        """Grid index of ``t``; raises ValueError when t is off the grid."""
        k = int(round(float(t) / self.dt))
        if k < 0 or k > self.n or abs(k * self.dt - float(t)) > GRID_TOL * max(1.0, self.T):
            raise ValueError(f"t={t} is not a point of the grid (T={self.T}, n={self.n})")
        return k

    def sub(self, k: int) -> "TimeGrid":
        """Grid of [0, t_k] with the same spacing."""
        if k < 1 or k > self.n:
            raise ValueError(f"sub-grid index {k} outside 1..{self.n}")
        return TimeGrid(T=k * self.dt, n=k)

    def to_dict(self) -> Dict[str, Any]:
        return {"T": self.T, "n": self.n}


@dataclass(frozen=True, eq=False)
class DriverPath:
    """A continuous driver U sampled on a grid, U_0 = 0."""
    grid: TimeGrid
    values: np.ndarray
    interpolation: Interpolation = Interpolation.LINEAR
    meta: Mapping[str, Any] = field(default_factory=dict)
    latent: Optional[np.ndarray] = None

    def __post_init__(self):
        vals = frozen_array(self.values)
        if vals.shape != (self.grid.n + 1,):
            raise ValueError(f"expected {self.grid.n + 1} driver values, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("driver values must be finite")
        if vals[0] != 0.0:
            raise ValueError(f"driver must start at 0, got U_0={vals[0]}")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "interpolation", Interpolation(self.interpolation))
        object.__setattr__(self, "meta", dict(self.meta))
        if self.latent is not None:
            object.__setattr__(self, "latent", frozen_array(self.latent))

    @property
    def times(self) -> np.ndarray:
        return self.grid.points

    def at(self, t: float) -> float:
        return float(self.values[self.grid.index_of(t)])

    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.values[:-1] + self.values[1:])

    def restrict(self, k: int) -> "DriverPath":
        """The driver on [0, t_k]."""
        latent = None if self.latent is None else self.latent[: k + 1]
        return DriverPath(self.grid.sub(k), self.values[: k + 1], self.interpolation, self.meta, latent)


@dataclass(frozen=True, eq=False)
class FiniteEnergyDriver(DriverPath):
    """Driver with piecewise-constant derivative ḣ and energy profile e(t)."""
    hdot: Optional[np.ndarray] = None
    energy: Optional[np.ndarray] = None

    def __post_init__(self):
        super().__post_init__()
        if self.hdot is None or self.energy is None:
            raise ValueError("finite-energy drivers need ḣ samples and an energy profile")
        hdot = frozen_array(self.hdot)
        energy = frozen_array(self.energy)
        if hdot.shape != (self.grid.n,) or energy.shape != (self.grid.n + 1,):
            raise ValueError("ḣ needs one value per step and e one value per grid point")
        object.__setattr__(self, "hdot", hdot)
        object.__setattr__(self, "energy", energy)

    @property
    def base(self) -> DriverPath:
        return DriverPath(self.grid, self.values, self.interpolation, self.meta)

    def energy_at(self, t: float) -> float:
        return float(self.energy[self.grid.index_of(t)])

    def restrict(self, k: int) -> "FiniteEnergyDriver":
        return FiniteEnergyDriver(
            self.grid.sub(k), self.values[: k + 1], self.interpolation, self.meta, None,
            hdot=self.hdot[:k], energy=self.energy[: k + 1],
        )


@dataclass(frozen=True, eq=False)
class BrownianPath(DriverPath):
    """Scaled Brownian sample with increments of variance κ(t_i)·Δt."""
    seed: int = 0
    kappa_steps: Tuple[Tuple[float, float], ...] = ((0.0, 1.0),)


@dataclass(frozen=True, eq=False)
class ReversedDriver(DriverPath):
    """β_s = U_t − U_{t−s} on the grid of [0, t]."""
    anchor: float = 0.0
    anchor_index: int = 0


@dataclass(frozen=True, eq=False)
class Decomposition:
    """β = N + A with A of finite energy."""
    beta: ReversedDriver
    N: DriverPath
    A: FiniteEnergyDriver
    ito_residual: float = 0.0

    @property
    def anchor(self) -> float:
        return self.beta.anchor

    @property
    def energy(self) -> float:
        return float(self.A.energy[-1])


@dataclass(frozen=True, eq=False)
class DriverBatch:
    """Many driver samples on one grid with their absolute-time drift densities."""
    grid: TimeGrid
    values: np.ndarray
    drift: np.ndarray
    seeds: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", frozen_array(self.values))
        object.__setattr__(self, "drift", frozen_array(self.drift))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    @property
    def size(self) -> int:
        return self.values.shape[0]


class FlowStatus(Enum):
    ALIVE = "alive"
    SWALLOWED = "swallowed"


@dataclass(frozen=True)
class ForwardResult:
    """Outcome of integrating the forward equation for one point."""
    z: complex
    t: float
    status: FlowStatus
    g: Optional[complex] = None
    tau: Optional[float] = None
    hcap: float = float("nan")

    @property
    def alive(self) -> bool:
        return self.status is FlowStatus.ALIVE

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["status"] = self.status.value
        return jsonable(data)


@dataclass(frozen=True, eq=False)
class BackwardFlow:
    """Time-reversed flow started at z = x + iy, sampled on the grid of [0, t]."""
    anchor: float
    z: complex
    times: np.ndarray
    beta: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    G: np.ndarray
    Gdot: np.ndarray
    Gdot_prime: np.ndarray
    Ydot: np.ndarray
    logfp: float
    logfp_path: np.ndarray
    logfp_variational: float
    fprime: complex
    substeps: int

    def __post_init__(self):
        for name in ("times", "beta", "X", "Y", "G", "Gdot", "Gdot_prime", "Ydot", "logfp_path"):
            object.__setattr__(self, name, frozen_array(getattr(self, name)))

    @property
    def x(self) -> float:
        return float(self.z.real)

    @property
    def y(self) -> float:
        return float(self.z.imag)

    @property
    def f(self) -> complex:
        """f_t(z + U_t) = P_t + U_t, which is X_t + iY_t because β_t = U_t."""
        return complex(self.X[-1], self.Y[-1])

    def two_route_gap(self) -> float:
        return abs(self.logfp - self.logfp_variational)


@dataclass(frozen=True, eq=False)
class PartitionSequence:
    """Nested partitions of the grid indices 0..n, coarse to fine."""
    n: int
    levels: Tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(frozen_array(lv, dtype=np.int64) for lv in self.levels))

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def finest(self) -> np.ndarray:
        return self.levels[-1]

    def mesh_steps(self) -> List[int]:
        return [int(np.max(np.diff(lv))) for lv in self.levels]

    def is_nested(self) -> bool:
        for coarse, fine in zip(self.levels[:-1], self.levels[1:]):
            if not np.all(np.isin(coarse, fine)):
                return False
        return all(lv[0] == 0 and lv[-1] == self.n and np.all(np.diff(lv) > 0) for lv in self.levels)

    def truncated(self, k: int) -> "PartitionSequence":
        """Cells cut at index k (the ∧t of the Föllmer sums)."""
        levels = []
        for lv in self.levels:
            cut = lv[lv < k]
            levels.append(np.append(cut, k))
        return PartitionSequence(n=k, levels=tuple(levels))

    def for_reversal(self, k: int) -> "PartitionSequence":
        """Index reflections j -> k − j of the partition points in [0, k]."""
        levels = []
        for lv in self.levels:
            inside = lv[lv <= k]
            refl = np.unique(np.concatenate(([0, k], k - inside)))
            levels.append(refl)
        return PartitionSequence(n=k, levels=tuple(levels))

    def to_dict(self) -> Dict[str, Any]:
        return {"n": self.n, "depth": self.depth, "mesh_steps": self.mesh_steps()}


@dataclass(frozen=True, eq=False)
class LimitEstimate:
    """Level-wise values of a sum along π_n with its Cauchy certificate."""
    values: Tuple[float, ...]
    mesh_steps: Tuple[int, ...]

    @property
    def value(self) -> float:
        return float(self.values[-1])

    @property
    def differences(self) -> List[float]:
        return [abs(b - a) for a, b in zip(self.values[:-1], self.values[1:])]

    @property
    def certificate(self) -> float:
        diffs = self.differences
        if not diffs:
            return float("nan")
        return float(max(diffs[-2:]))

    def to_dict(self) -> Dict[str, Any]:
        return jsonable({
            "value": self.value,
            "levels": list(self.values),
            "mesh_steps": list(self.mesh_steps),
            "differences": self.differences,
            "cauchy_certificate": self.certificate,
        })


@dataclass(frozen=True, eq=False)
class QVPath:
    """Föllmer brackets per level over the grid indices 0..k."""
    partitions: PartitionSequence
    brackets: Tuple[np.ndarray, ...]
    dt: float
    kappa_hat: float
    min_window: float

    def __post_init__(self):
        object.__setattr__(self, "brackets", tuple(frozen_array(b) for b in self.brackets))

    @property
    def finest(self) -> np.ndarray:
        return self.brackets[-1]

    @property
    def extrapolated(self) -> float:
        return float(self.brackets[-1][-1])

    def at_levels(self) -> List[float]:
        return [float(b[-1]) for b in self.brackets]


@dataclass(frozen=True, eq=False)
class IntegralReport:
    """Pathwise integrals of a backward flow against β."""
    follmer: LimitEstimate
    rough: LimitEstimate
    gsq_dr: float
    gsq_dbracket: LimitEstimate
    gprime_dbracket: LimitEstimate

    def to_dict(self) -> Dict[str, Any]:
        return {
            "M_pi": self.follmer.to_dict(),
            "M_rough": self.rough.to_dict(),
            "int_Gdot_sq_dr": jsonable(self.gsq_dr),
            "int_Gdot_sq_dbracket": self.gsq_dbracket.to_dict(),
            "int_Gdot_prime_dbracket": self.gprime_dbracket.to_dict(),
        }


@dataclass
class EstimateEntry:
    t: float
    y: float
    lhs: float
    rhs: float
    x: float = 0.0
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def margin(self) -> float:
        if self.lhs == 0.0:
            return float("inf")
        return self.rhs / self.lhs

    @property
    def gap(self) -> float:
        return abs(self.rhs - self.lhs)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["margin"] = self.margin
        data["gap"] = self.gap
        return jsonable(data)


class ReportKind(Enum):
    INEQUALITY = "inequality"
    IDENTITY = "identity"


@dataclass
class EstimateReport:
    """LHS/RHS pairs for one inequality (margin = RHS/LHS) or identity (gap)."""
    name: str
    entries: List[EstimateEntry] = field(default_factory=list)
    slack: float = 1e-3
    kind: ReportKind = ReportKind.INEQUALITY
    gated: bool = False
    notes: List[str] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def min_margin(self) -> float:
        if not self.entries:
            return float("nan")
        return float(min(e.margin for e in self.entries))

    @property
    def max_gap(self) -> float:
        if not self.entries:
            return float("nan")
        return float(max(e.gap for e in self.entries))

    @property
    def passed(self) -> bool:
        if self.gated or not self.entries:
            return False
        if self.kind is ReportKind.IDENTITY:
            return self.max_gap <= self.slack
        return self.min_margin >= 1.0 - self.slack

    def to_dict(self) -> Dict[str, Any]:
        return jsonable({
            "name": self.name,
            "kind": self.kind.value,
            "slack": self.slack,
            "gated": self.gated,
            "passed": self.passed,
            "min_margin": self.min_margin,
            "max_gap": self.max_gap,
            "notes": self.notes,
            "meta": self.meta,
            "entries": [e.to_dict() for e in self.entries],
        })


@dataclass(frozen=True)
class EstimateConstants:
    """Constants of the power-b estimate for a diffusivity κ < 2."""
    kappa: float
    c0: float
    eps: float
    c_eps: float
    b: float
    p: float

    @property
    def q(self) -> float:
        """Hölder conjugate of p."""
        return self.p / (self.p - 1.0)

    @property
    def alpha(self) -> float:
        """Exponential-moment exponent q·b/(4ε) needed for ||A||²."""
        return self.q * self.b / (4.0 * self.eps)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["q"] = self.q
        data["alpha"] = self.alpha
        return data


@dataclass(frozen=True, eq=False)
class Trace:
    """Extracted trace with per-point certificates."""
    grid: TimeGrid
    points: np.ndarray
    converged: np.ndarray
    level: np.ndarray
    gap: np.ndarray
    y_levels: np.ndarray
    f_values: np.ndarray
    fprime_abs: np.ndarray
    v_values: np.ndarray
    theta_slope: np.ndarray
    tol: float
    theta: float

    def __post_init__(self):
        for name, dtype in (("points", complex), ("converged", bool), ("level", np.int64), ("gap", float),
                            ("y_levels", float), ("f_values", complex), ("fprime_abs", float),
                            ("v_values", float), ("theta_slope", float)):
            object.__setattr__(self, name, frozen_array(getattr(self, name), dtype=dtype))

    @property
    def times(self) -> np.ndarray:
        return self.grid.points

    @property
    def converged_fraction(self) -> float:
        return float(np.mean(self.converged))

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    @property
    def theta_ok(self) -> np.ndarray:
        return self.theta_slope > -self.theta

    def mirrored(self) -> np.ndarray:
        """Reflection z -> −z̄ of the trace points."""
        return -np.conj(self.points)


@dataclass
class RegularityReport:
    holder_half: float
    sqrt_reparam_lip: float
    pvar: Dict[str, float]
    sigma_hat: Optional[float]
    c_hat: Optional[float]
    min_gap: float
    separation: float
    excluded_points: int = 0
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return jsonable(asdict(self))


@dataclass
class ConeReport:
    precondition_ok: bool
    driver_holder_half: float
    skipped: bool
    upper_ok: bool = False
    max_upper_ratio: float = float("nan")
    sigma_hat: float = float("nan")
    c_hat: float = float("nan")
    slack: float = 1e-6
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return (not self.skipped) and self.upper_ok and self.sigma_hat > 0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["passed"] = self.passed
        return jsonable(data)


@dataclass
class ContinuityTable:
    rows: List[Dict[str, float]] = field(default_factory=list)
    columns: Tuple[str, ...] = ("sup", "holder", "pvar")
    refused: bool = False
    reason: Optional[str] = None
    min_decay: float = 1.5

    def decay_ok(self) -> Dict[str, bool]:
        """Each column shrinks by ≥ min_decay whenever the driver distance halves."""
        result = {}
        for col in self.columns:
            ok = True
            for prev, cur in zip(self.rows[:-1], self.rows[1:]):
                if prev[col] == 0.0 and cur[col] == 0.0:
                    continue
                halved = cur["driver_distance"] <= 0.5 * prev["driver_distance"] * (1 + 1e-9)
                if halved and cur[col] * self.min_decay > prev[col]:
                    ok = False
            result[col] = ok
        return result

    @property
    def passed(self) -> bool:
        return (not self.refused) and all(self.decay_ok().values())

    def to_dict(self) -> Dict[str, Any]:
        return jsonable({
            "refused": self.refused,
            "reason": self.reason,
            "rows": self.rows,
            "decay_ok": self.decay_ok() if not self.refused else {},
            "passed": self.passed,
        })


@dataclass
class MomentEntry:
    t: float
    y: float
    mean: float
    ci: float
    count: int
    proxy_mean: Optional[float] = None
    proxy_ci: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return jsonable(asdict(self))


@dataclass
class MomentReport:
    name: str
    b: Optional[float]
    entries: List[MomentEntry] = field(default_factory=list)
    alpha: Optional[float] = None
    count: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)
    checks: Dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(self.checks.values())

    def to_dict(self) -> Dict[str, Any]:
        return jsonable({
            "name": self.name,
            "b": self.b,
            "alpha": self.alpha,
            "count": self.count,
            "checks": self.checks,
            "passed": self.passed,
            "meta": self.meta,
            "entries": [e.to_dict() for e in self.entries],
        })


@dataclass
class TailTable:
    theta: float
    b_target: float
    rows: List[Dict[str, float]] = field(default_factory=list)
    slope: Optional[float] = None
    fitted_levels: List[int] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        if self.rows and all(r["exceedances"] == 0 for r in self.rows):
            return True
        return self.slope is not None and self.slope >= self.b_target - 0.5

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["passed"] = self.passed
        return jsonable(data)
