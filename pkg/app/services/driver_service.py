"""
Driver construction, sampling, time reversal and decomposition service
"""
import logging
import math
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.signal import lfilter

from app.config import settings
from app.models import (
    BrownianPath,
    Decomposition,
    DriverBatch,
    DriverPath,
    FiniteEnergyDriver,
    Interpolation,
    ReversedDriver,
    TimeGrid,
)
from app.schemas import FiniteEnergySpec, FunctionalSpec
from app.utils.norms import holder_seminorm, running_holder_pieces
from app.utils.validators import ArrayValidator

logger = logging.getLogger(__name__)

ArrayFn = Callable[[Any, Any], Any]


class DriverError(Exception):
    """Custom exception for driver errors"""
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Independent reproducible stream for one path"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


class Functional:
    """U_t = F(t, B_t) together with F', F'' (in x) and Ḟ (in t), vectorised over (t, x)."""

    def __init__(self, name: str, F: ArrayFn, dF: ArrayFn, d2F: ArrayFn, dtF: ArrayFn,
                 space_independent: bool = False, kappa_bound: Optional[Callable[[float], float]] = None):
        self.name = name
        self.F = F
        self.dF = dF
        self.d2F = d2F
        self.dtF = dtF
        self.space_independent = space_independent
        self._kappa_bound = kappa_bound

    def kappa_bound(self, T: float) -> float:
        """sup |F'|² on [0, T] (used for the kappa < 2 gate)."""
        if self._kappa_bound is None:
            raise DriverError(f"functional {self.name} has no |F'|² bound")
        return float(self._kappa_bound(T))


def builtin_functional(name: str, p: float = 1.0, kappa: float = 1.0) -> Functional:
    if name == "linear":
        s = math.sqrt(kappa)
        return Functional(
            "linear",
            F=lambda t, x: s * np.asarray(x, dtype=float),
            dF=lambda t, x: s * np.ones_like(np.asarray(x, dtype=float)),
            d2F=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
            dtF=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
            space_independent=True,
            kappa_bound=lambda T: kappa,
        )
    if name == "t_pow_p":
        return Functional(
            f"t_pow_p(p={p})",
            F=lambda t, x: np.power(t, p) * x,
            dF=lambda t, x: np.power(t, p) * np.ones_like(np.asarray(x, dtype=float)),
            d2F=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
            dtF=lambda t, x: p * np.power(t, p - 1.0) * x,
            space_independent=True,
            kappa_bound=lambda T: T ** (2 * p),
        )
    if name == "t_log1p_x2":
        return Functional(
            "t_log1p_x2",
            F=lambda t, x: t * np.log1p(np.square(x)),
            dF=lambda t, x: 2.0 * t * x / (1.0 + np.square(x)),
            d2F=lambda t, x: 2.0 * t * (1.0 - np.square(x)) / np.square(1.0 + np.square(x)),
            dtF=lambda t, x: np.log1p(np.square(x)),
            space_independent=False,
            kappa_bound=lambda T: T ** 2,
        )
    raise DriverError(f"Unknown functional: {name}")


def resolve_functional(spec: FunctionalSpec) -> Functional:
    if spec.custom is not None:
        return spec.custom
    return builtin_functional(spec.F, p=spec.p, kappa=spec.kappa)


class DriverService:
    """Service for building, sampling, reversing and decomposing drivers"""

    # ---- finite energy -------------------------------------------------

    def make_finite_energy(self, hdot: Sequence[float], grid: TimeGrid,
                           meta: Optional[Dict[str, Any]] = None) -> FiniteEnergyDriver:
        """Driver h with h(t_i) = Σ_{j<i} ḣ_j Δt and e(t_i) = Σ_{j<i} ḣ_j² Δt."""
        try:
            hdot = ArrayValidator.validate_finite(hdot, "ḣ samples")
            ArrayValidator.validate_length(hdot, grid.n, "ḣ samples (one per grid step)")
        except ValueError as e:
            raise DriverError(str(e)) from e
        dt = grid.dt
        values = np.concatenate(([0.0], np.cumsum(hdot * dt)))
        energy = np.concatenate(([0.0], np.cumsum(np.square(hdot) * dt)))
        return FiniteEnergyDriver(grid, values, Interpolation.LINEAR, meta or {"kind": "finite_energy"},
                                  None, hdot=hdot, energy=energy)

    def hdot_from_steps(self, steps: Sequence[Tuple[float, float]], grid: TimeGrid) -> np.ndarray:
        """Piecewise-constant ḣ sampled at step midpoints"""
        starts = np.array([s for s, _ in steps], dtype=float)
        vals = np.array([v for _, v in steps], dtype=float)
        mids = grid.points[:-1] + 0.5 * grid.dt
        return vals[np.searchsorted(starts, mids, side="right") - 1]

    def cm_norm_sq(self, h: FiniteEnergyDriver, t: float) -> float:
        try:
            return h.energy_at(t)
        except ValueError as e:
            raise DriverError(str(e)) from e

    # ---- sampling -------------------------------------------------------

    def sample_driver(self, spec: Any, grid: TimeGrid, seed: Optional[int] = None) -> DriverPath:
        """One sample path; identical output for identical (spec, grid, seed)"""
        seed = spec.seed if seed is None else int(seed)
        if seed < 0:
            raise DriverError(f"seed must be nonnegative, got {seed}")
        rng = make_rng(seed)
        path = self._sample(spec, grid, rng, seed)
        logger.debug(f"Sampled {spec.kind} driver on n={grid.n} with seed {seed}")
        return path

    def _sample(self, spec: Any, grid: TimeGrid, rng: np.random.Generator, seed: int) -> DriverPath:
        meta = {"kind": spec.kind, "seed": seed, "rng": settings.RNG_ALGORITHM}
        n, dt = grid.n, grid.dt

        if spec.kind == "finite_energy":
            return self.make_finite_energy(self.hdot_from_steps(spec.hdot_steps, grid), grid, meta)

        elif spec.kind == "brownian":
            if spec.kappa < 0:
                raise DriverError("kappa must be nonnegative")
            incr = math.sqrt(spec.kappa * dt) * rng.standard_normal(n)
            values = np.concatenate(([0.0], np.cumsum(incr)))
            return BrownianPath(grid, values, Interpolation.LINEAR, meta, None,
                                seed=seed, kappa_steps=((0.0, spec.kappa),))

        elif spec.kind == "variable_kappa":
            kappas = self.kappa_on_steps(spec.kappa_steps, grid)
            if np.any(kappas < 0):
                raise DriverError("kappa(.) is negative on part of the grid")
            incr = np.sqrt(kappas * dt) * rng.standard_normal(n)
            values = np.concatenate(([0.0], np.cumsum(incr)))
            return BrownianPath(grid, values, Interpolation.LINEAR, meta, None,
                                seed=seed, kappa_steps=tuple(tuple(s) for s in spec.kappa_steps))

        elif spec.kind == "h_perturbed":
            inner = self._sample(spec.inner, grid, rng, seed)
            h = self.make_finite_energy(self.hdot_from_steps(spec.h.hdot_steps, grid), grid)
            meta["inner"] = spec.inner.kind
            return DriverPath(grid, inner.values + h.values, Interpolation.LINEAR, meta, inner.latent)

        elif spec.kind == "ou":
            if spec.lam <= 0:
                raise DriverError("OU rate lambda must be > 0")
            z0 = rng.normal(0.0, math.sqrt(0.5))
            xi = rng.standard_normal(n)
            decay = math.exp(-spec.lam * dt)
            sd = math.sqrt(0.5 * (1.0 - decay ** 2))
            # exact transition Z_{i+1} = decay·Z_i + sd·ξ_i
            z, _ = lfilter([1.0], [1.0, -decay], sd * xi, zi=[decay * z0])
            states = np.concatenate(([z0], z))
            meta["z0"] = float(z0)
            return DriverPath(grid, states - z0, Interpolation.LINEAR, meta, states)

        elif spec.kind == "functional":
            fn = resolve_functional(spec)
            b = np.concatenate(([0.0], np.cumsum(math.sqrt(dt) * rng.standard_normal(n))))
            return self.functional_path(fn, grid, b, meta)

        raise DriverError(f"Unknown driver kind: {spec.kind}")

    def kappa_on_steps(self, steps: Sequence[Tuple[float, float]], grid: TimeGrid) -> np.ndarray:
        """κ(t_i) at the left endpoint of every step"""
        starts = np.array([s for s, _ in steps], dtype=float)
        vals = np.array([k for _, k in steps], dtype=float)
        return vals[np.searchsorted(starts, grid.points[:-1], side="right") - 1]

    def functional_path(self, fn: Functional, grid: TimeGrid, b: np.ndarray,
                        meta: Optional[Dict[str, Any]] = None) -> DriverPath:
        f00 = float(fn.F(0.0, 0.0))
        if f00 != 0.0:
            raise DriverError(f"functional drivers require F(0,0) = 0, got {f00}")
        values = np.asarray(fn.F(grid.points, b), dtype=float).copy()
        values[0] = 0.0
        if not np.all(np.isfinite(values)):
            raise DriverError(f"functional {fn.name} produced non-finite samples")
        return DriverPath(grid, values, Interpolation.LINEAR, meta or {"kind": "functional"}, b)

    def sample_batch(self, spec: Any, grid: TimeGrid, seeds: Sequence[int]) -> DriverBatch:
        """Paths for many seeds with their drift profiles; row i equals sample_driver(spec, grid, seeds[i])"""
        values = np.empty((len(seeds), grid.n + 1))
        drift = np.empty((len(seeds), grid.n))
        for row, seed in enumerate(seeds):
            path = self.sample_driver(spec, grid, seed)
            values[row] = path.values
            drift[row] = self.drift_profile(spec, path)
        return DriverBatch(grid, values, drift, tuple(seeds))

    # ---- reversal and decomposition ---------------------------------------

    def time_reverse(self, U: DriverPath, t: float) -> ReversedDriver:
        """β_s = U_t − U_{t−s} on the grid of [0, t]"""
        try:
            k = U.grid.index_of(t)
        except ValueError as e:
            raise DriverError(str(e)) from e
        if k == 0:
            raise DriverError("anchor t must be a positive grid time")
        values = U.values[k] - U.values[k::-1]
        anchor = float(U.grid.points[k])
        return ReversedDriver(U.grid.sub(k), values, U.interpolation, {"anchor": anchor}, None,
                              anchor=anchor, anchor_index=k)

    def drift_profile(self, spec: Any, path: DriverPath) -> np.ndarray:
        """
        Drift density a_i of the finite-energy part of every reversed driver.

        Step i of the sample grid ([t_i, t_{i+1}]) carries a_i; for an anchor t_k
        the reversed driver β = N + A has Ȧ on reversed step j equal to a_{k−1−j}.
        The value never depends on the anchor, so one profile serves all of them.
        """
        return self._drift(spec, path.grid, path.latent)

    def _drift(self, spec: Any, grid: TimeGrid, latent: Optional[np.ndarray]) -> np.ndarray:
        if spec.kind == "finite_energy":
            return self.hdot_from_steps(spec.hdot_steps, grid)
        elif spec.kind in ("brownian", "variable_kappa"):
            return np.zeros(grid.n)
        elif spec.kind == "ou":
            # reversed stationary OU is OU again, so β picks up drift λ·Z_{t−s}
            return spec.lam * np.asarray(latent)[1:]
        elif spec.kind == "functional":
            return self._functional_drift(resolve_functional(spec), grid, np.asarray(latent))
        elif spec.kind == "h_perturbed":
            return self._drift(spec.inner, grid, latent) + self.hdot_from_steps(spec.h.hdot_steps, grid)
        raise DriverError(f"Unknown driver kind: {spec.kind}")

    def _functional_drift(self, fn: Functional, grid: TimeGrid, b: np.ndarray) -> np.ndarray:
        t1 = grid.points[1:]
        b1 = b[1:]
        if fn.space_independent:
            return np.asarray(fn.dtF(t1, b1), dtype=float)
        drift = fn.dtF(t1, b1) - 0.5 * fn.d2F(t1, b1) + fn.dF(t1, b1) * b1 / t1
        drift = np.array(drift, dtype=float)
        # singular factor B_s/s: the step touching s = 0 contributes nothing
        drift[0] = 0.0
        return drift

    def _split(self, beta: ReversedDriver, hdot_a: np.ndarray, residual: float = 0.0) -> Decomposition:
        A = self.make_finite_energy(hdot_a, beta.grid, {"part": "A", "anchor": beta.anchor})
        N = DriverPath(beta.grid, beta.values - A.values, beta.interpolation, {"part": "N", "anchor": beta.anchor})
        return Decomposition(beta=beta, N=N, A=A, ito_residual=residual)

    def decompose(self, spec: Any, path: DriverPath, t: float) -> Decomposition:
        """β = N + A at anchor t for any driver kind"""
        if spec.kind == "functional":
            return self.decompose_functional(resolve_functional(spec), path, t)
        beta = self.time_reverse(path, t)
        drift = self.drift_profile(spec, path)[: beta.anchor_index]
        return self._split(beta, drift[::-1])

    def decompose_functional(self, fn: Any, B: DriverPath, t: float) -> Decomposition:
        """
        Semimartingale decomposition of β for U = F(·, B).

        ``B`` may be the Brownian path itself or a functional driver carrying it
        as latent state. The Itô-sum reconstruction of N is kept as a residual
        diagnostic: max |N_ito − (β − A)| over the grid.
        """
        if isinstance(fn, FunctionalSpec):
            fn = resolve_functional(fn)
        b = np.asarray(B.latent if B.latent is not None else B.values)
        U = self.functional_path(fn, B.grid, b, {"kind": "functional", "F": fn.name})
        beta = self.time_reverse(U, t)
        k = beta.anchor_index
        drift = self._functional_drift(fn, B.grid, b)[:k]
        decomposition = self._split(beta, drift[::-1], self._ito_residual(fn, B.grid, b, k, beta, drift))
        logger.debug(f"Decomposed {fn.name} at t={t}: residual {decomposition.ito_residual:.3e}")
        return decomposition

    def _ito_residual(self, fn: Functional, grid: TimeGrid, b: np.ndarray, k: int,
                      beta: ReversedDriver, drift: np.ndarray) -> float:
        t1 = grid.points[1:k + 1]
        b1 = b[1:k + 1]
        dB = b[1:k + 1] - b[:k]
        grad = np.asarray(fn.dF(t1, b1), dtype=float) * np.ones(k)
        if fn.space_independent:
            dW = dB
        else:
            # reversed Brownian motion is a bridge; W̃ removes its drift B_s/s
            dW = dB - b1 / t1 * grid.dt
            dW[0] = 0.0
            grad = grad.copy()
            grad[0] = 0.0
        incr = (grad * dW)[::-1]
        n_ito = np.concatenate(([0.0], np.cumsum(incr)))
        a_vals = np.concatenate(([0.0], np.cumsum(drift[::-1] * grid.dt)))
        return float(np.max(np.abs(n_ito - (beta.values - a_vals))))

    # ---- path surgery -----------------------------------------------------

    def split_driver(self, U: DriverPath, t1: float) -> Tuple[DriverPath, DriverPath]:
        """Head on [0, t1] and tail Ũ_s = U_{t1+s} − U_{t1} on [0, T − t1]"""
        try:
            k = U.grid.index_of(t1)
        except ValueError as e:
            raise DriverError(str(e)) from e
        n = U.grid.n
        if not 0 < k < n:
            raise DriverError(f"split time must be strictly inside (0, T), got {t1}")
        tail_grid = TimeGrid(T=(n - k) * U.grid.dt, n=n - k)
        if isinstance(U, FiniteEnergyDriver):
            return U.restrict(k), self.make_finite_energy(U.hdot[k:], tail_grid, {"part": "tail"})
        return U.restrict(k), DriverPath(tail_grid, U.values[k:] - U.values[k], U.interpolation, {"part": "tail"})

    def reflect_driver(self, U: DriverPath) -> DriverPath:
        """U ↦ −U"""
        meta = dict(U.meta, reflected=True)
        if isinstance(U, FiniteEnergyDriver):
            return self.make_finite_energy(-U.hdot, U.grid, meta)
        return DriverPath(U.grid, -U.values, U.interpolation, meta)

    def holder_half_seminorm(self, U: DriverPath) -> float:
        return holder_seminorm(U.times, U.values, 0.5)

    def concatenate_pieces(self, U: DriverPath, bound: float = 4.0) -> List[Tuple[float, float]]:
        """Split times so that every piece has ½-Hölder seminorm below ``bound``"""
        pieces = running_holder_pieces(U.times, U.values, bound)
        times = U.times
        for start, end in pieces:
            if end - start == 1 and abs(U.values[end] - U.values[start]) >= bound * math.sqrt(U.grid.dt):
                logger.warning(f"Single grid step [{times[start]}, {times[end]}] exceeds the Hölder bound {bound}")
        return [(float(times[s]), float(times[e])) for s, e in pieces]

    def read_values(self, spec: Any, grid: TimeGrid, values: Sequence[float]) -> DriverPath:
        """Wrap externally supplied samples (driver CSV) as a path on ``grid``"""
        try:
            arr = ArrayValidator.validate_finite(values, "driver samples")
            ArrayValidator.validate_length(arr, grid.n + 1, "driver samples (one per grid point)")
            return DriverPath(grid, arr, Interpolation.LINEAR, {"kind": "file"})
        except ValueError as e:
            raise DriverError(str(e)) from e


# Global service instance
driver_service = DriverService()
