"""
Pathwise verification of the derivative estimates

Every check assembles both sides of one inequality from the flow, pathint and
drivers services and returns an EstimateReport. Exponential inequalities are
compared on the exponential scale so margins are RHS/LHS ratios throughout.
"""
import logging
import math
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid

from app.config import settings
from app.models import (
    BackwardFlow,
    Decomposition,
    DriverPath,
    EstimateConstants,
    EstimateEntry,
    EstimateReport,
    FiniteEnergyDriver,
    PartitionSequence,
)
from app.schemas import FlowConfig
from app.services.driver_service import DriverError, driver_service
from app.services.flow_service import FlowError, flow_service
from app.services.pathint_service import PathIntegralError, pathint_service
from app.utils.validators import InputValidator

logger = logging.getLogger(__name__)


class VerificationError(Exception):
    """Custom exception for verification errors"""
    pass


def constants_for_kappa(kappa: float) -> EstimateConstants:
    """ε = (2−κ)/4, c_ε = (1−ε)/κ + ½, b = 1 + c_ε, p = 2c_ε/b, c₀ = ½ + 1/κ"""
    try:
        kappa = InputValidator.validate_kappa(kappa)
    except ValueError as e:
        raise VerificationError(str(e)) from e
    c0 = 0.5 + 1.0 / kappa
    eps = (2.0 - kappa) / 4.0
    c_eps = (1.0 - eps) / kappa + 0.5
    b = 1.0 + c_eps
    p = 2.0 * c_eps / b
    constants = EstimateConstants(kappa=kappa, c0=c0, eps=eps, c_eps=c_eps, b=b, p=p)
    if not (b > 2.0 and p > 1.0 and eps > 0.0 and p * b / 2.0 <= c_eps + 1e-12 and c_eps <= c0):
        raise VerificationError(f"constant chain does not close for kappa={kappa}: {constants}")
    return constants


class VerificationService:
    """Service for checking the pathwise estimates on sampled drivers"""

    def _flow(self, U: DriverPath, t: float, y: float, x: float, cfg: Optional[FlowConfig]):
        try:
            beta = driver_service.time_reverse(U, t)
            return beta, flow_service.backward_flow(beta, y, x, cfg)
        except (DriverError, FlowError) as e:
            raise VerificationError(str(e)) from e

    def check_cm_bound(self, h: FiniteEnergyDriver, y_list: Sequence[float], t_list: Sequence[float],
                       x_rays: Sequence[float] = (), cfg: Optional[FlowConfig] = None,
                       slack: Optional[float] = None) -> EstimateReport:
        """
        |f'_t(iy + U_t)| ≤ exp(¼||U||²_t) and, on the rays x = r·y,
        |f'_t(x + iy + U_t)| ≤ (y/Y_t)(1 + x²/y²)·exp(¼||U||²_t).
        """
        if not isinstance(h, FiniteEnergyDriver):
            raise VerificationError("the Cameron-Martin bound needs a finite-energy driver")
        ys = InputValidator.validate_heights(y_list)
        rays = [0.0] + [float(r) for r in x_rays if r != 0.0]
        points = [complex(r * y, y) for r in rays for y in ys]
        try:
            batch = flow_service.eval_batch(h, t_list, points, cfg, derivative=True)
        except FlowError as e:
            raise VerificationError(str(e)) from e
        report = EstimateReport(
            name="cm_bound",
            slack=settings.DETERMINISTIC_SLACK if slack is None else slack,
            meta={"rays": rays, "energy_T": float(h.energy[-1])},
        )
        for i, t in enumerate(batch.t_list):
            growth = math.exp(0.25 * h.energy_at(t))
            for j, z in enumerate(batch.z_list):
                lhs = float(abs(batch.fprime[i, j]))
                x, y = z.real, z.imag
                if x == 0.0:
                    rhs, bound = growth, "cm"
                else:
                    y_t = float(batch.f[i, j].imag)
                    rhs, bound = (y / y_t) * (1.0 + x * x / (y * y)) * growth, "finer"
                report.entries.append(EstimateEntry(t=float(t), y=float(y), x=float(x), lhs=lhs, rhs=rhs,
                                                    extra={"bound": bound}))
        logger.info(f"CM bound: {len(report.entries)} points, min margin {report.min_margin:.6g}")
        return report

    def _gate(self, report: EstimateReport, kappa: float, source: str) -> bool:
        if kappa >= 2.0:
            report.gated = True
            report.notes.append(f"kappa must be < 2 ({source} kappa = {kappa:.6g}); hypothesis fails")
            logger.warning(f"{report.name}: gated, {source} kappa {kappa:.6g} >= 2")
            return True
        return False

    def check_keyest(self, U: DriverPath, y: float, t: float, partitions: Optional[PartitionSequence] = None,
                     cfg: Optional[FlowConfig] = None, declared_kappa: Optional[float] = None,
                     slack: Optional[float] = None) -> EstimateReport:
        """|f'_t(iy + U_t)| ≤ exp[M^π_t − ∫Ġ²dr − ½∫Ġ²d[β]^π]"""
        beta, flow = self._flow(U, t, y, 0.0, cfg)
        deterministic = isinstance(U, FiniteEnergyDriver)
        report = EstimateReport(
            name="keyest",
            slack=self._slack(slack, deterministic),
        )
        if deterministic:
            m = pathint_service.riemann_stieltjes(flow.Gdot, U.hdot[: beta.anchor_index][::-1], beta.grid.dt)
            gsq_bracket, kappa_hat, cert = 0.0, 0.0, 0.0
            report.notes.append("finite-energy driver: bracket vanishes, M is a Riemann-Stieltjes integral")
        else:
            parts = self._reflected(U, beta.anchor_index, partitions)
            ints = pathint_service.integral_report(flow, parts)
            self._resolution(report, parts, beta.grid.dt, y)
            kappa_hat = pathint_service.follmer_qv(beta, parts, beta.anchor).kappa_hat
            m, gsq_bracket = ints.follmer.value, ints.gsq_dbracket.value
            cert = max(ints.follmer.certificate, ints.gsq_dbracket.certificate)
        kappa = declared_kappa if declared_kappa is not None else kappa_hat
        report.meta.update({"kappa_hat": kappa_hat, "kappa_used": kappa, "cauchy_certificate": cert})
        if self._gate(report, kappa, "declared" if declared_kappa is not None else "measured"):
            return report
        gsq_dr = float(trapezoid(np.square(flow.Gdot), flow.times))
        exponent = m - gsq_dr - 0.5 * gsq_bracket
        report.entries.append(EstimateEntry(
            t=float(beta.anchor), y=y, lhs=float(np.exp(flow.logfp)), rhs=math.exp(exponent),
            extra={"M": m, "int_Gdot_sq_dr": gsq_dr, "int_Gdot_sq_dbracket": gsq_bracket,
                   "dropped_term": (kappa / 2.0 - 1.0) * math.log(flow.Y[-1] / y)},
        ))
        return report

    def check_key1(self, U: DriverPath, decomposition: Decomposition, constants: EstimateConstants,
                   y: float, partitions: Optional[PartitionSequence] = None,
                   cfg: Optional[FlowConfig] = None, slack: Optional[float] = None) -> EstimateReport:
        """|f'|^b ≤ exp(b∫Ġd^πN − (pb²/2)∫Ġ²d[N]^π)·exp((b/4ε)||A||²_t)"""
        beta = decomposition.beta
        try:
            flow = flow_service.backward_flow(beta, y, 0.0, cfg)
        except FlowError as e:
            raise VerificationError(str(e)) from e
        parts = self._reflected(U, beta.anchor_index, partitions)
        n_vals = decomposition.N.values
        m = pathint_service.follmer_integral(flow.Gdot, n_vals, parts)
        q = pathint_service.bracket_integral(np.square(flow.Gdot), n_vals, parts)
        kappa_hat = pathint_service.follmer_qv(decomposition.N, parts, beta.anchor).kappa_hat
        b, p, eps = constants.b, constants.p, constants.eps
        report = EstimateReport(
            name="key1",
            slack=self._slack(slack, isinstance(U, FiniteEnergyDriver)),
            meta={"constants": constants.to_dict(), "kappa_hat_N": kappa_hat,
                  "cauchy_certificate": max(m.certificate, q.certificate)},
        )
        if not isinstance(U, FiniteEnergyDriver):
            self._resolution(report, parts, beta.grid.dt, y)
        if self._gate(report, constants.kappa, "constants"):
            return report
        energy = decomposition.energy
        log_rhs = b * m.value - 0.5 * p * b * b * q.value + b / (4.0 * eps) * energy
        report.entries.append(EstimateEntry(
            t=float(beta.anchor), y=y, lhs=float(np.exp(b * flow.logfp)), rhs=math.exp(log_rhs),
            extra={"M_N": m.value, "Q_N": q.value, "energy_A": energy},
        ))
        return report

    def check_young_split(self, flow: BackwardFlow, decomposition: Decomposition, eps: float) -> EstimateReport:
        """∫Ġ dA ≤ ε∫Ġ²dr + (1/4ε)∫Ȧ²dr, compared as exponentials"""
        if eps <= 0:
            raise VerificationError(f"eps must be > 0, got {eps}")
        A = decomposition.A
        lhs = pathint_service.riemann_stieltjes(flow.Gdot, A.hdot, A.grid.dt)
        gsq = float(trapezoid(np.square(flow.Gdot), flow.times))
        rhs = eps * gsq + decomposition.energy / (4.0 * eps)
        report = EstimateReport(name="young_split", slack=settings.DETERMINISTIC_SLACK, meta={"eps": eps})
        report.entries.append(EstimateEntry(
            t=float(flow.anchor), y=flow.y, x=flow.x, lhs=math.exp(lhs), rhs=math.exp(rhs),
            extra={"int_Gdot_dA": lhs, "int_Gdot_sq_dr": gsq, "energy_A": decomposition.energy},
        ))
        return report

    def check_reduction_chain(self, flow: BackwardFlow, partitions: PartitionSequence,
                              constants: EstimateConstants) -> EstimateReport:
        """
        With A ≡ 0: b·(keyest exponent) ≤ b·(M − c₀∫Ġ²d[β]) ≤ bM − (pb²/2)∫Ġ²d[β].

        The first step replaces ∫Ġ²dr by (1/κ)∫Ġ²d[β]; it holds when the cell
        slopes of the bracket stay below κ and is recorded, not asserted. The
        second step is algebra in the constants. The dropped term
        (κ/2 − 1)·log(Y_t/y) ≤ 0 is the other asserted entry.
        """
        ints = pathint_service.integral_report(flow, partitions)
        b, p, c0, kappa = constants.b, constants.p, constants.c0, constants.kappa
        m, q = ints.follmer.value, ints.gsq_dbracket.value
        keyest = m - ints.gsq_dr - 0.5 * q
        middle = m - c0 * q
        key1 = b * m - 0.5 * p * b * b * q
        dropped = (kappa / 2.0 - 1.0) * math.log(flow.Y[-1] / flow.y)
        report = EstimateReport(
            name="reduction_chain",
            slack=settings.DETERMINISTIC_SLACK,
            meta={
                "constants": constants.to_dict(),
                "keyest_times_b": b * keyest,
                "middle_times_b": b * middle,
                "key1_A0": key1,
                "replacement_holds": bool(b * keyest <= b * middle + 1e-12),
            },
        )
        report.entries.append(EstimateEntry(t=float(flow.anchor), y=flow.y, lhs=math.exp(b * middle),
                                            rhs=math.exp(key1), extra={"step": "constants"}))
        report.entries.append(EstimateEntry(t=float(flow.anchor), y=flow.y, lhs=math.exp(dropped), rhs=1.0,
                                            extra={"step": "dropped_term"}))
        return report

    def _reflected(self, U: DriverPath, k: int, partitions: Optional[PartitionSequence]) -> PartitionSequence:
        try:
            if partitions is None:
                partitions = pathint_service.dyadic_partitions(U.grid.n)
            return pathint_service.reflect(partitions, k)
        except PathIntegralError as e:
            raise VerificationError(str(e)) from e

    def _resolution(self, report: EstimateReport, parts: PartitionSequence, dt: float, y: float) -> None:
        resolution = pathint_service.anchor_resolution(parts, dt, y)
        report.meta["anchor_resolution"] = resolution
        if resolution > settings.MAX_ANCHOR_RESOLUTION:
            report.notes.append(f"finest mesh is {resolution:.3g}·y² (limit {settings.MAX_ANCHOR_RESOLUTION:g}·y²); "
                                f"sums near the anchor are under-resolved, refine the grid")
            logger.warning(f"{report.name}: mesh/y² = {resolution:.3g} at y={y:g} exceeds "
                           f"{settings.MAX_ANCHOR_RESOLUTION:g}")

    def _slack(self, slack: Optional[float], deterministic: bool) -> float:
        if slack is not None:
            return slack
        return settings.DETERMINISTIC_SLACK if deterministic else settings.STOCHASTIC_SLACK


# Global service instance
verify_service = VerificationService()
