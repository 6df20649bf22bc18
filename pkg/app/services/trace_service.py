"""
Trace extraction and regularity diagnostics

γ_t is read off as the limit of f_t(iy + U_t) along a geometric y schedule.
All (t, y) columns go through one backward sweep; convergence is decided by a
Cauchy rule per grid time and unconverged points are flagged, never dropped.
"""
import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import linregress

from app.models import ConeReport, ContinuityTable, DriverPath, FiniteEnergyDriver, RegularityReport, Trace
from app.schemas import FlowConfig, TraceConfig
from app.services.driver_service import driver_service
from app.services.flow_service import FlowError, flow_service
from app.utils.norms import grid_pvariation, holder_seminorm, min_separated_gap, sqrt_reparam_lip
from app.utils.validators import InputValidator

logger = logging.getLogger(__name__)

# exact slit compositions; one map per grid step
TRACE_FLOW = FlowConfig(scheme="slit", substeps=1)


class TraceError(Exception):
    """Custom exception for trace errors"""
    pass


def path_energy(U: DriverPath) -> float:
    """||U||²_T of the piecewise-linear interpolant (exact for finite-energy drivers)"""
    if isinstance(U, FiniteEnergyDriver):
        return float(U.energy[-1])
    return float(np.sum(np.square(np.diff(U.values))) / U.grid.dt)


class TraceService:
    """Service for extracting traces and measuring their regularity"""

    def extract_trace(self, U: DriverPath, cfg: Optional[TraceConfig] = None,
                      flow_cfg: Optional[FlowConfig] = None) -> Trace:
        cfg = cfg or TraceConfig()
        flow_cfg = flow_cfg or TRACE_FLOW
        n = U.grid.n
        ys = np.array(cfg.y_levels())
        levels = len(ys)

        anchors = np.repeat(np.arange(1, n + 1), levels)
        points = np.tile(1j * ys, n)
        try:
            res = flow_service.sweep(U.values, U.grid.dt, anchors, points, flow_cfg, derivative=True)
        except FlowError as e:
            raise TraceError(str(e)) from e

        f_values = np.empty((n + 1, levels), dtype=complex)
        fprime_abs = np.empty((n + 1, levels))
        f_values[0] = 1j * ys
        fprime_abs[0] = 1.0
        f_values[1:] = res.q[0].reshape(n, levels)
        fprime_abs[1:] = np.abs(res.fprime[0]).reshape(n, levels)

        gaps = np.abs(np.diff(f_values, axis=1))
        hit = gaps < cfg.tol
        converged = hit.any(axis=1)
        first = np.where(converged, np.argmax(hit, axis=1), levels - 2)
        level = first + 1
        rows = np.arange(n + 1)
        gap = gaps[rows, first]
        trace_points = f_values[rows, level]

        converged[0], level[0], gap[0] = True, 0, 0.0
        trace_points[0] = 0.0

        v_values = self._v_values(ys, fprime_abs)
        slopes = np.polyfit(np.log(ys), np.log(fprime_abs[1:]).T, 1)[0]
        theta_slope = np.concatenate(([0.0], slopes))

        missed = int(np.count_nonzero(~converged))
        if missed:
            logger.warning(f"{missed} of {n + 1} trace points did not converge at tol={cfg.tol}")
        return Trace(
            grid=U.grid,
            points=trace_points,
            converged=converged,
            level=level,
            gap=gap,
            y_levels=ys,
            f_values=f_values,
            fprime_abs=fprime_abs,
            v_values=v_values,
            theta_slope=theta_slope,
            tol=cfg.tol,
            theta=cfg.theta,
        )

    def _v_values(self, ys: np.ndarray, fprime_abs: np.ndarray) -> np.ndarray:
        """v(t, y_k) = ∫_0^{y_k} |f'(ir + U_t)| dr: trapezoid over the schedule plus a flat tail below it"""
        asc_y = ys[::-1]
        asc_f = fprime_abs[:, ::-1]
        pieces = 0.5 * (asc_f[:, 1:] + asc_f[:, :-1]) * np.diff(asc_y)
        tail = asc_y[0] * asc_f[:, :1]
        v_asc = np.concatenate((tail, tail + np.cumsum(pieces, axis=1)), axis=1)
        return v_asc[:, ::-1]

    def certificates(self, trace: Trace, U: DriverPath) -> Dict[str, Any]:
        """Koebe, finite-energy and continuity bounds at every evaluated (t, y)"""
        ys = trace.y_levels[None, :]
        koebe = trace.v_values / (0.25 * ys * trace.fprime_abs)
        data: Dict[str, Any] = {
            "koebe_min_ratio": float(np.min(koebe)),
            "koebe_ok": bool(np.min(koebe) >= 1.0 / (1.0 + 1e-3)),
            "theta_ok_fraction": float(np.mean(trace.theta_ok)),
        }
        if isinstance(U, FiniteEnergyDriver):
            bound = ys * np.exp(0.25 * U.energy)[:, None]
            ratio = float(np.max(trace.v_values / bound))
            data["finite_energy_max_ratio"] = ratio
            data["finite_energy_ok"] = ratio <= 1.0 + 1e-3
        theta = trace.theta
        cont_bound = ys ** (1.0 - theta) / (1.0 - theta)
        dist = np.abs(trace.f_values - trace.points[:, None])
        data["continuity_max_ratio"] = float(np.max(dist / cont_bound))
        return data

    # ---- norms -----------------------------------------------------------------

    def _usable(self, trace: Trace, allow_partial: bool):
        if trace.all_converged:
            return trace.times, trace.points, 0
        if not allow_partial:
            raise TraceError(f"trace has {int(np.count_nonzero(~trace.converged))} unconverged points")
        keep = trace.converged
        return trace.times[keep], trace.points[keep], int(np.count_nonzero(~keep))

    def holder_half_norm(self, trace: Trace, allow_partial: bool = False) -> float:
        t, g, _ = self._usable(trace, allow_partial)
        return holder_seminorm(t, g, 0.5)

    def sqrt_reparam_lip(self, trace: Trace, allow_partial: bool = False) -> float:
        """Lipschitz constant of u ↦ γ(u²)"""
        t, g, _ = self._usable(trace, allow_partial)
        return sqrt_reparam_lip(t, g)

    def pvar_norm(self, trace: Trace, p: float, allow_partial: bool = False) -> float:
        """Grid p-variation: exact over sub-partitions of the sampled points"""
        if p < 1:
            raise TraceError(f"p-variation needs p >= 1, got {p}")
        _, g, _ = self._usable(trace, allow_partial)
        return grid_pvariation(g, p)

    def simple_curve_check(self, trace: Trace, separation: float, allow_partial: bool = False) -> Dict[str, Any]:
        """min |γ_t − γ_s| over |t − s| ≥ separation; zero within tol flags a self-touching trace"""
        t, g, _ = self._usable(trace, allow_partial)
        gap, s, u = min_separated_gap(t, g, separation)
        return {
            "min_gap": gap,
            "s": s,
            "t": u,
            "separation": separation,
            "flagged": bool(gap <= trace.tol),
        }

    def cone_constants(self, trace: Trace) -> Dict[str, float]:
        """σ̂ = inf Im γ_t/√t and ĉ = sup |Re γ_t|/√t over converged t > 0"""
        keep = trace.converged & (trace.times > 0)
        if not keep.any():
            return {"sigma_hat": float("nan"), "c_hat": float("nan")}
        root = np.sqrt(trace.times[keep])
        pts = trace.points[keep]
        return {
            "sigma_hat": float(np.min(pts.imag / root)),
            "c_hat": float(np.max(np.abs(pts.real) / root)),
        }

    def regularity_report(self, trace: Trace, p_eps: float = 0.1, separation: float = 2.0 ** -6,
                          allow_partial: bool = True) -> RegularityReport:
        _, _, excluded = self._usable(trace, allow_partial)
        cone = self.cone_constants(trace)
        simple = self.simple_curve_check(trace, separation, allow_partial)
        notes = ["p-variation is the grid p-variation (a lower bound for the curve)"]
        if excluded:
            notes.append(f"{excluded} unconverged points excluded from all norms")
        return RegularityReport(
            holder_half=self.holder_half_norm(trace, allow_partial),
            sqrt_reparam_lip=self.sqrt_reparam_lip(trace, allow_partial),
            pvar={"p": 1.0 + p_eps, "value": self.pvar_norm(trace, 1.0 + p_eps, allow_partial)},
            sigma_hat=cone["sigma_hat"],
            c_hat=cone["c_hat"],
            min_gap=simple["min_gap"],
            separation=separation,
            excluded_points=excluded,
            notes=notes,
        )

    # ---- experiments -------------------------------------------------------------

    def cone_check(self, U: DriverPath, y_list: Sequence[float], t_list: Sequence[float],
                   flow_cfg: Optional[FlowConfig] = None, slack: float = 1e-6) -> ConeReport:
        """σ√t ≤ Im f_t(iy + U_t) ≤ √(y² + 4t), gated on a ½-Hölder driver norm below 4"""
        ys = InputValidator.validate_heights(y_list)
        ts = np.asarray(t_list, dtype=float)
        if np.any(ts <= 0):
            raise TraceError("cone check needs t > 0")
        hol = driver_service.holder_half_seminorm(U)
        if hol >= 4.0:
            pieces = driver_service.concatenate_pieces(U, 4.0)
            logger.warning(f"Cone check skipped: driver ½-Hölder norm {hol:.3f} >= 4")
            return ConeReport(
                precondition_ok=False, driver_holder_half=hol, skipped=True, slack=slack,
                notes=[f"driver ½-Hölder norm {hol:.6g} >= 4; pieces below the bound: {pieces}"],
            )
        try:
            batch = flow_service.eval_batch(U, ts, 1j * ys, flow_cfg, derivative=False)
        except FlowError as e:
            raise TraceError(str(e)) from e
        f = batch.f
        tt = batch.t_list[:, None]
        upper = np.sqrt(np.square(ys)[None, :] + 4.0 * tt)
        ratio = float(np.max(f.imag / upper))
        root = np.sqrt(tt)
        return ConeReport(
            precondition_ok=True,
            driver_holder_half=hol,
            skipped=False,
            upper_ok=ratio <= 1.0 + slack,
            max_upper_ratio=ratio,
            sigma_hat=float(np.min(f.imag / root)),
            c_hat=float(np.max(np.abs(f.real) / root)),
            slack=slack,
        )

    def perturbation_ladder(self, U: DriverPath, ladder: Sequence[int]) -> List[DriverPath]:
        """Uⁿ = U + (s ↦ s/n) for every n of the ladder"""
        out = []
        for m in ladder:
            shift = driver_service.make_finite_energy(np.full(U.grid.n, 1.0 / m), U.grid)
            if isinstance(U, FiniteEnergyDriver):
                out.append(driver_service.make_finite_energy(U.hdot + shift.hdot, U.grid, {"ladder": m}))
            else:
                out.append(DriverPath(U.grid, U.values + shift.values, U.interpolation, {"ladder": m}))
        return out

    def continuity_experiment(self, U: DriverPath, sequence: Sequence[DriverPath], alpha: float = 0.4,
                              eps: float = 0.1, cfg: Optional[TraceConfig] = None,
                              flow_cfg: Optional[FlowConfig] = None,
                              energy_bound: float = 100.0) -> ContinuityTable:
        """Distances between the traces of Uⁿ and U in sup, α-Hölder and (1+ε)-variation"""
        energies = [path_energy(V) for V in [U, *sequence]]
        if max(energies) > energy_bound:
            reason = f"driver energy {max(energies):.6g} exceeds the bound {energy_bound:.6g}"
            logger.warning(f"Continuity experiment refused: {reason}")
            return ContinuityTable(refused=True, reason=reason)
        if any(V.grid != U.grid for V in sequence):
            raise TraceError("continuity experiment needs every driver on the same grid")

        base = self.extract_trace(U, cfg, flow_cfg)
        times = base.times
        table = ContinuityTable()
        for V in sequence:
            other = self.extract_trace(V, cfg, flow_cfg)
            diff = other.points - base.points
            table.rows.append({
                "driver_distance": float(np.max(np.abs(V.values - U.values))),
                "sup": float(np.max(np.abs(diff))),
                "holder": holder_seminorm(times, diff, alpha),
                "pvar": grid_pvariation(diff, 1.0 + eps),
                "energy": path_energy(V),
                "converged": float(other.converged_fraction),
            })
        return table

    def holder_fit(self, slopes: Sequence[float], norms: Sequence[float]) -> Dict[str, Any]:
        """
        Fit log||γ||_{1/2} = C₁ + C₂c² over a linear-driver family h_s = c·s.

        C₁ is also lifted by the largest residual so that the fitted form
        bounds every observation.
        """
        c2 = np.square(np.asarray(slopes, dtype=float))
        logs = np.log(np.asarray(norms, dtype=float))
        fit = linregress(c2, logs)
        resid = logs - (fit.intercept + fit.slope * c2)
        return {
            "C1": float(fit.intercept),
            "C2": float(fit.slope),
            "C1_envelope": float(fit.intercept + max(0.0, float(np.max(resid)))),
            "r_value": float(fit.rvalue),
            "c": list(map(float, slopes)),
            "norms": list(map(float, norms)),
        }

    def mirror_distance(self, trace_a: Trace, trace_b: Trace) -> float:
        """sup |γ^a − (−conj γ^b)|"""
        if trace_a.grid != trace_b.grid:
            raise TraceError("traces live on different grids")
        return float(np.max(np.abs(trace_a.points - trace_b.mirrored())))

    def zero_trace_error(self, trace: Trace) -> float:
        """sup |γ_t − 2i√t| for the trace of the zero driver"""
        return float(np.max(np.abs(trace.points - 2j * np.sqrt(trace.times))))


# Global service instance
trace_service = TraceService()
