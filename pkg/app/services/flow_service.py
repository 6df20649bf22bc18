"""
Loewner flow service: forward equation, inverse maps and the reversed flow

The inverse map is computed in absolute time. For an anchor t_k write
Q_r = P_{t−r} + U_t; then dQ/dr = 2/(Q − U_r), integrated from r = t_k down
to 0, and f_t(z + U_t) = Q_0. The vector field does not depend on the anchor,
so one backward sweep over the grid serves every (anchor, point) column and
every sample path at once.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from app.config import settings
from app.models import BackwardFlow, DriverPath, FlowStatus, ForwardResult, ReversedDriver
from app.schemas import FlowConfig
from app.services.driver_service import DriverError, driver_service
from app.services.integrators import (
    forward_rk4,
    forward_slit,
    inverse_rk4,
    inverse_slit,
    swallow_offset,
    trapezoid_weight,
)
from app.utils.validators import InputValidator

logger = logging.getLogger(__name__)


class FlowError(Exception):
    """Custom exception for flow errors"""
    pass


@dataclass
class SweepResult:
    """Final states of a backward sweep, shaped (paths, columns)."""
    q: np.ndarray
    log_deriv: Optional[np.ndarray] = None
    logfp: Optional[np.ndarray] = None
    follmer_m: Optional[np.ndarray] = None
    follmer_q: Optional[np.ndarray] = None
    record_q: Optional[np.ndarray] = None
    record_logfp: Optional[np.ndarray] = None

    @property
    def fprime(self) -> np.ndarray:
        return np.exp(self.log_deriv)


@dataclass
class BatchEvaluation:
    """f_t(z + U_t) and f'_t for every (t, z) pair of a batch."""
    t_list: np.ndarray
    z_list: np.ndarray
    f: np.ndarray
    fprime: Optional[np.ndarray] = None


class FlowService:
    """Service for integrating the Loewner equation and its time reversal"""

    def __init__(self, config: Optional[FlowConfig] = None):
        self.default_config = config

    def _cfg(self, cfg: Optional[FlowConfig]) -> FlowConfig:
        return cfg or self.default_config or FlowConfig()

    def _index(self, U: DriverPath, t: float) -> int:
        try:
            k = U.grid.index_of(t)
        except ValueError as e:
            raise FlowError(str(e)) from e
        return k

    # ---- forward ----------------------------------------------------------

    def forward_point(self, U: DriverPath, z: complex, t: float, cfg: Optional[FlowConfig] = None) -> ForwardResult:
        """Integrate ġ = 2/(g − U), g_0 = z, up to t or until z is swallowed"""
        cfg = self._cfg(cfg)
        try:
            z = InputValidator.validate_point(z, allow_real=True)
        except ValueError as e:
            raise FlowError(str(e)) from e
        k = self._index(U, t)
        dt, m = U.grid.dt, cfg.substeps
        h = dt / m
        delta = cfg.delta_for(dt)
        u = U.values
        g = z
        for i in range(k):
            u0, u1 = float(u[i]), float(u[i + 1])
            for j in range(m):
                ua = u0 * (1 - j / m) + u1 * (j / m)
                ub = u0 * (1 - (j + 1) / m) + u1 * ((j + 1) / m)
                um = 0.5 * (ua + ub)
                w = g - um
                s = swallow_offset(w, h, delta)
                if s is not None:
                    tau = min(i * dt + j * h + s, k * dt)
                    logger.debug(f"Point {z} swallowed at tau={tau:.6g}")
                    return ForwardResult(z=z, t=k * dt, status=FlowStatus.SWALLOWED, tau=tau)
                if cfg.scheme == "slit" or abs(g - ua) ** 2 < cfg.slit_switch_ratio * h:
                    g = um + forward_slit(w, h)
                else:
                    g = forward_rk4(g, ua, ub, h)
                if z.imag > 0 and g.imag < cfg.min_imag_guard:
                    g = complex(g.real, cfg.min_imag_guard)
        hcap = float(((g - z) * z).real)
        return ForwardResult(z=z, t=k * dt, status=FlowStatus.ALIVE, g=g, hcap=hcap)

    # ---- backward sweep -------------------------------------------------------

    def sweep(self, values: np.ndarray, dt: float, anchors: Sequence[int], z: Sequence[complex],
              cfg: Optional[FlowConfig] = None, derivative: bool = False, quadrature: bool = False,
              follmer_stride: Optional[int] = None, drift: Optional[np.ndarray] = None,
              record: bool = False) -> SweepResult:
        """
        Integrate dQ/dr = 2/(Q − U_r) backward for every column.

        values: driver samples, shape (paths, n+1) or (n+1,)
        anchors, z: per-column anchor index k and relative start point; the
        column starts at Q = z + U_{t_k}.
        follmer_stride: accumulate Σ Ġ_u ΔN and Σ Ġ_u² ΔN² over reversed cells
        of that many steps, with N = β − A and A driven by ``drift`` (paths, n).
        """
        cfg = self._cfg(cfg)
        values = np.atleast_2d(np.asarray(values, dtype=float))
        anchors = np.asarray(anchors, dtype=np.int64)
        z = np.asarray(z, dtype=complex)
        if anchors.shape != z.shape or anchors.ndim != 1:
            raise FlowError("anchors and points must be 1-d arrays of equal length")
        n_paths = values.shape[0]
        order = np.argsort(-anchors, kind="stable")
        restore = np.argsort(order, kind="stable")
        a_sorted = anchors[order]
        kmax = int(a_sorted[0]) if len(a_sorted) else 0
        if len(a_sorted) and (a_sorted[-1] < 0 or kmax >= values.shape[1]):
            raise FlowError("anchor index outside the grid")

        q = z[order][None, :] + values[:, a_sorted]
        log_deriv = np.zeros(q.shape, dtype=complex) if derivative else None
        logfp = np.zeros(q.shape) if quadrature else None
        # active[a] = number of leading columns with anchor >= a
        active = np.searchsorted(-a_sorted, -np.arange(kmax + 1), side="right")

        follow = follmer_stride is not None
        if follow:
            stride = int(follmer_stride)
            if np.any(a_sorted % stride):
                raise FlowError(f"anchors must lie on the partition of stride {stride}")
            drift = np.zeros((n_paths, values.shape[1] - 1)) if drift is None else np.atleast_2d(drift)
            cum_a = np.concatenate((np.zeros((n_paths, 1)), np.cumsum(drift * dt, axis=1)), axis=1)
            fm = np.zeros(q.shape)
            fq = np.zeros(q.shape)

        rec_q = rec_l = None
        if record:
            rec_q = np.full(q.shape + (kmax + 1,), np.nan, dtype=complex)
            rec_l = np.full(q.shape + (kmax + 1,), np.nan)

        m = cfg.substeps
        h = dt / m
        for a in range(kmax, 0, -1):
            c = int(active[a])
            qa = q[:, :c]
            if follow and a % stride == 0:
                w = qa - values[:, a:a + 1]
                gdot = np.real(2.0 / w)
                dn = (values[:, a:a + 1] - values[:, a - stride:a - stride + 1]) - \
                     (cum_a[:, a:a + 1] - cum_a[:, a - stride:a - stride + 1])
                fm[:, :c] += gdot * dn
                fq[:, :c] += gdot * gdot * dn * dn
            if record:
                rec_q[:, :c, a] = qa
                if quadrature:
                    rec_l[:, :c, a] = logfp[:, :c]
            u0 = values[:, a - 1:a]
            u1 = values[:, a:a + 1]
            for j in range(m - 1, -1, -1):
                u_hi = u0 * (1 - (j + 1) / m) + u1 * ((j + 1) / m)
                u_lo = u0 * (1 - j / m) + u1 * (j / m)
                qa, dlog, dquad = self._substep(qa, u_hi, u_lo, h, cfg, quadrature)
                if derivative:
                    log_deriv[:, :c] += dlog
                if quadrature:
                    logfp[:, :c] += dquad
            q[:, :c] = qa
        if record:
            rec_q[:, :, 0] = q
            if quadrature:
                rec_l[:, :, 0] = logfp

        def unsort(arr):
            return None if arr is None else arr[:, restore]

        return SweepResult(
            q=unsort(q),
            log_deriv=unsort(log_deriv),
            logfp=unsort(logfp),
            follmer_m=unsort(fm) if follow else None,
            follmer_q=unsort(fq) if follow else None,
            record_q=None if rec_q is None else rec_q[:, restore, :],
            record_logfp=None if rec_l is None else rec_l[:, restore, :],
        )

    def _substep(self, q, u_hi, u_lo, h, cfg: FlowConfig, quadrature: bool):
        if cfg.scheme == "slit":
            q_new, dlog = inverse_slit(q, 0.5 * (u_hi + u_lo), h)
            return q_new, dlog, dlog.real
        w = q - u_hi
        near = np.abs(w) ** 2 < cfg.slit_switch_ratio * h
        q_new, dlog = inverse_rk4(q, u_hi, u_lo, h)
        dquad = trapezoid_weight(w, q_new - u_lo, h) if quadrature else None
        if near.any():
            # exact slit map near the singular start (tiny Im at small y)
            c = np.broadcast_to(0.5 * (u_hi + u_lo), q.shape)
            q_s, dlog_s = inverse_slit(q[near], c[near], h)
            q_new[near] = q_s
            dlog[near] = dlog_s
            if quadrature:
                dquad[near] = dlog_s.real
        return q_new, dlog, dquad

    # ---- point evaluations ------------------------------------------------------

    def _relative_point(self, z: complex) -> complex:
        try:
            return InputValidator.validate_point(z)
        except ValueError as e:
            raise FlowError(str(e)) from e

    def eval_f(self, U: DriverPath, z: complex, t: float, cfg: Optional[FlowConfig] = None) -> complex:
        """f_t(z + U_t), z in the upper half-plane relative to the driver tip"""
        z = self._relative_point(z)
        k = self._index(U, t)
        result = self.sweep(U.values, U.grid.dt, [k], [z], cfg)
        return complex(result.q[0, 0])

    def fprime_variational(self, U: DriverPath, z: complex, t: float, cfg: Optional[FlowConfig] = None) -> complex:
        """f'_t(z + U_t) from the variational equation integrated alongside the map"""
        z = self._relative_point(z)
        k = self._index(U, t)
        result = self.sweep(U.values, U.grid.dt, [k], [z], cfg, derivative=True)
        return complex(result.fprime[0, 0])

    def eval_batch(self, U: DriverPath, t_list: Sequence[float], z_list: Sequence[complex],
                   cfg: Optional[FlowConfig] = None, derivative: bool = True) -> BatchEvaluation:
        """All (t, z) combinations in one sweep; arrays are shaped (len(t_list), len(z_list))"""
        zs = np.array([self._relative_point(z) for z in z_list], dtype=complex)
        ks = np.array([self._index(U, t) for t in t_list], dtype=np.int64)
        anchors = np.repeat(ks, len(zs))
        points = np.tile(zs, len(ks))
        result = self.sweep(U.values, U.grid.dt, anchors, points, cfg, derivative=derivative)
        shape = (len(ks), len(zs))
        return BatchEvaluation(
            t_list=U.grid.points[ks],
            z_list=zs,
            f=result.q[0].reshape(shape),
            fprime=result.fprime[0].reshape(shape) if derivative else None,
        )

    def fprime_split(self, U: DriverPath, z: complex, t1: float, t: float,
                     cfg: Optional[FlowConfig] = None) -> Tuple[complex, complex]:
        """
        f'_t(z + U_t) as a product of two stage derivatives.

        With Ũ_s = U_{t1+s} − U_{t1} and t2 = t − t1:
        f_t(z + U_t) = f_{t1}(ζ + U_{t1}) where ζ = f̃_{t2}(z + Ũ_{t2}).
        Returns (product of stage derivatives, ζ).
        """
        z = self._relative_point(z)
        k = self._index(U, t)
        k1 = self._index(U, t1)
        if not 0 < k1 < k:
            raise FlowError(f"split time {t1} must lie strictly inside (0, {t})")
        try:
            _, tail = driver_service.split_driver(U.restrict(k), t1)
        except DriverError as e:
            raise FlowError(str(e)) from e
        late = self.sweep(tail.values, tail.grid.dt, [k - k1], [z], cfg, derivative=True)
        zeta = complex(late.q[0, 0])
        early = self.sweep(U.values, U.grid.dt, [k1], [zeta], cfg, derivative=True)
        return complex(early.fprime[0, 0] * late.fprime[0, 0]), zeta

    # ---- reversed flow -------------------------------------------------------------

    def backward_flow(self, beta: ReversedDriver, y: float, x: float = 0.0,
                      cfg: Optional[FlowConfig] = None) -> BackwardFlow:
        """Reversed flow from z = x + iy with the (X, Y) coordinates sampled on β's grid"""
        if not (math.isfinite(y) and y > 0):
            raise FlowError(f"backward flow needs y > 0, got {y}")
        cfg = self._cfg(cfg)
        substeps = cfg.substeps
        for attempt in range(settings.MAX_SUBSTEP_DOUBLINGS + 1):
            flow = self._backward_flow(beta, y, x, cfg.model_copy(update={"substeps": substeps}))
            gap = flow.two_route_gap()
            if cfg.scheme != "rk4" or not cfg.auto_refine or gap <= cfg.two_route_tol * max(1.0, abs(flow.logfp)):
                return flow
            if attempt < settings.MAX_SUBSTEP_DOUBLINGS:
                logger.warning(f"Two-route log|f'| gap {gap:.2e} at {substeps} substeps; doubling")
                substeps *= 2
        return flow

    def _backward_flow(self, beta: ReversedDriver, y: float, x: float, cfg: FlowConfig) -> BackwardFlow:
        b = beta.values
        k = beta.grid.n
        # forward driver whose reversal at t_k is β
        u = b[-1] - b[::-1]
        z = complex(x, y)
        res = self.sweep(u, beta.grid.dt, [k], [z], cfg, derivative=True, quadrature=True, record=True)
        q_abs = res.record_q[0, 0]
        l_abs = res.record_logfp[0, 0]
        W = (q_abs - u)[::-1]
        X, Y = W.real, W.imag
        R = X * X + Y * Y
        gdot = 2.0 * X / R
        ydot = 2.0 * Y / R
        log_deriv = complex(res.log_deriv[0, 0])
        return BackwardFlow(
            anchor=beta.anchor,
            z=z,
            times=beta.grid.points,
            beta=b,
            X=X,
            Y=Y,
            G=b - X,
            Gdot=gdot,
            Gdot_prime=ydot / Y - gdot * gdot,
            Ydot=ydot,
            logfp=float(res.logfp[0, 0]),
            logfp_path=l_abs[::-1],
            logfp_variational=log_deriv.real,
            fprime=complex(np.exp(log_deriv)),
            substeps=cfg.substeps,
        )

    def gubinelli_remainder(self, flow: BackwardFlow, alpha: float = 0.45, stride: int = 1) -> float:
        """2α-Hölder size of R_{u,v} = Ġ_v − Ġ_u − Ġ'_u (β_v − β_u) on every ``stride``-th grid point"""
        idx = np.arange(0, len(flow.times), stride)
        t, g, gp, b = flow.times[idx], flow.Gdot[idx], flow.Gdot_prime[idx], flow.beta[idx]
        best = 0.0
        for i in range(len(idx) - 1):
            r = g[i + 1:] - g[i] - gp[i] * (b[i + 1:] - b[i])
            best = max(best, float(np.max(np.abs(r) / (t[i + 1:] - t[i]) ** (2 * alpha))))
        return best


# Global service instance
flow_service = FlowService()
