"""
Monte Carlo checks over seeded driver samples

Seeds are cut into fixed chunks of settings.MC_CHUNK_PATHS paths. Each chunk
runs one batched sweep; chunk statistics are merged in chunk order, so the
numbers written out do not depend on the thread count.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence

import numpy as np
from scipy import stats

from app.config import settings
from app.models import MomentEntry, MomentReport, TailTable, TimeGrid
from app.schemas import FlowConfig
from app.services.driver_service import DriverError, driver_service
from app.services.flow_service import flow_service
from app.services.job_service import job_service
from app.services.pathint_service import PathIntegralError, pathint_service
from app.services.verify_service import VerificationError, constants_for_kappa
from app.utils.validators import InputValidator

logger = logging.getLogger(__name__)

# increments fed to the normality test
KS_SAMPLE_SIZE = 20_000


@dataclass
class RunningMoments:
    """Count, mean and sum of squared deviations per column"""
    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "RunningMoments":
        samples = np.atleast_2d(samples)
        mean = samples.mean(axis=0)
        return cls(count=samples.shape[0], mean=mean, m2=np.sum(np.square(samples - mean), axis=0))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        """Pairwise (Chan) update of count, mean and M2"""
        total = self.count + other.count
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / total)
        m2 = self.m2 + other.m2 + np.square(delta) * (self.count * other.count / total)
        return RunningMoments(count=total, mean=mean, m2=m2)

    def ci(self, level: float = 0.95) -> np.ndarray:
        """Half-width of the Student-t confidence interval of the mean"""
        if self.count < 2:
            return np.full(self.mean.shape, np.inf)
        sem = np.sqrt(self.m2 / (self.count - 1) / self.count)
        return stats.t.ppf(0.5 + level / 2.0, self.count - 1) * sem


def _chunks(seeds: Sequence[int]) -> List[List[int]]:
    size = settings.MC_CHUNK_PATHS
    seeds = list(seeds)
    return [seeds[i:i + size] for i in range(0, len(seeds), size)]


def _merge(parts: Sequence[RunningMoments]) -> RunningMoments:
    total = parts[0]
    for part in parts[1:]:
        total = total.merge(part)
    return total


class MonteCarloService:
    """Service for the statistical checks"""

    def _stride(self, grid: TimeGrid, anchors: Sequence[int], stride: Optional[int]) -> int:
        if stride is None:
            try:
                stride = pathint_service.dyadic_partitions(grid.n).mesh_steps()[-1]
            except PathIntegralError as e:
                raise VerificationError(str(e)) from e
        if any(k % stride for k in anchors):
            raise VerificationError(f"anchor times must lie on the partition of stride {stride}")
        return int(stride)

    def _anchors(self, grid: TimeGrid, t_list: Sequence[float]) -> List[int]:
        try:
            return [grid.index_of(t) for t in t_list]
        except ValueError as e:
            raise VerificationError(str(e)) from e

    def mc_moment(self, spec: Any, constants, y_list: Sequence[float], t_list: Sequence[float],
                  seeds: Sequence[int], grid: TimeGrid, cfg: Optional[FlowConfig] = None,
                  stride: Optional[int] = None, threads: Optional[int] = None) -> MomentReport:
        """E|f'_t(iy + U_t)|^b and the stochastic-exponential proxy per (t, y)"""
        ys = InputValidator.validate_heights(y_list)
        ks = self._anchors(grid, t_list)
        stride = self._stride(grid, ks, stride)
        anchors = np.repeat(ks, len(ys))
        points = np.tile(1j * ys, len(ks))
        b, pb = constants.b, constants.p * constants.b
        chunks = _chunks(seeds)

        def work(chunk):
            batch = driver_service.sample_batch(spec, grid, chunk)
            res = flow_service.sweep(batch.values, grid.dt, anchors, points, cfg, derivative=True,
                                     follmer_stride=stride, drift=batch.drift)
            fp_b = np.exp(b * res.log_deriv.real)
            proxy = np.exp(pb * res.follmer_m - 0.5 * pb * pb * res.follmer_q)
            logger.info(f"mc_moment: chunk of {len(chunk)} paths starting at seed {chunk[0]} done")
            return RunningMoments.from_samples(fp_b), RunningMoments.from_samples(proxy)

        results = job_service.map_ordered(work, chunks, threads)
        moments = _merge([r[0] for r in results])
        proxy = _merge([r[1] for r in results])
        ci, proxy_ci = moments.ci(), proxy.ci()

        report = MomentReport(name="mc_moment", b=b, count=moments.count,
                              meta={"constants": constants.to_dict(), "follmer_stride": stride,
                                    "chunk_paths": settings.MC_CHUNK_PATHS})
        for col in range(len(anchors)):
            report.entries.append(MomentEntry(
                t=float(grid.points[anchors[col]]), y=float(ys[col % len(ys)]),
                mean=float(moments.mean[col]), ci=float(ci[col]), count=moments.count,
                proxy_mean=float(proxy.mean[col]), proxy_ci=float(proxy_ci[col]),
            ))

        means = moments.mean.reshape(len(ks), len(ys))
        top = int(np.argmax(ys))
        growth = means / means[:, top:top + 1]
        ratio = means.max(axis=1) / means.min(axis=1)
        report.meta["max_min_ratio"] = ratio.tolist()
        report.meta["growth_vs_largest_y"] = growth.max(axis=1).tolist()
        finite = bool(np.all(np.isfinite(moments.mean)))
        report.checks = {
            "finite": finite,
            "ci_width": bool(np.all(2.0 * ci <= 0.2 * moments.mean)),
            "proxy_supermartingale": bool(np.all(proxy.mean <= 1.0 + 3.0 * proxy_ci + 1e-12)),
        }
        if spec.kind == "finite_energy":
            # a deterministic |f'|^b decays like y^b as y falls; only growth over the largest y counts
            report.checks["no_growth_below_largest_y"] = finite and bool(np.all(growth < 3.0))
        else:
            report.checks["y_stable"] = finite and bool(np.all(ratio < 3.0))
        return report

    def check_momentofF(self, spec: Any, alpha: Optional[float], T: float, seeds: Sequence[int], n: int,
                        ladder: Sequence[int] = (1, 2, 4), threads: Optional[int] = None) -> MomentReport:
        """E exp(α∫_0^T a_r² dr) for the drift density a of a functional driver"""
        if spec.kind != "functional":
            raise VerificationError("the exponential-moment check applies to functional drivers")
        kappa = spec.declared_kappa(T)
        if kappa >= 2.0:
            raise VerificationError(f"kappa must be < 2 (|F'|² bound {kappa:.6g} on [0, {T}])")
        if alpha is None:
            alpha = constants_for_kappa(kappa).alpha if kappa > 0 else 1.0
        if any(n % m for m in ladder):
            raise VerificationError(f"n={n} must be divisible by every ladder factor {list(ladder)}")
        grid = TimeGrid(T=T, n=n)
        cuts = [n // m for m in ladder]

        def work(chunk):
            try:
                batch = driver_service.sample_batch(spec, grid, chunk)
            except DriverError as e:
                raise VerificationError(str(e)) from e
            sq = np.cumsum(np.square(batch.drift), axis=1) * grid.dt
            return np.exp(alpha * sq[:, [k - 1 for k in cuts]])

        samples = np.concatenate(job_service.map_ordered(work, _chunks(seeds), threads), axis=0)
        mean = samples.mean(axis=0)
        ci = stats.t.ppf(0.975, samples.shape[0] - 1) * stats.sem(samples, axis=0)
        top = np.sort(samples[:, 0])[::-1][: max(1, samples.shape[0] // 10)]
        share = float(top.sum() / samples[:, 0].sum())

        report = MomentReport(name="momentofF", b=None, alpha=alpha, count=int(samples.shape[0]),
                              meta={"F": spec.F, "T": T, "kappa_bound": kappa, "top_decile_share": share,
                                    "log_mean": float(np.log(mean[0]))})
        for j, k in enumerate(cuts):
            report.entries.append(MomentEntry(t=float(grid.points[k]), y=float("nan"), mean=float(mean[j]),
                                              ci=float(ci[j]), count=int(samples.shape[0])))
        checks = {
            "finite": bool(np.all(np.isfinite(mean))),
            "top_decile": share < 0.5,
            "ladder": bool(all(mean[j + 1] <= mean[j] + 3.0 * (ci[j] + ci[j + 1]) + 1e-12
                               for j in range(len(cuts) - 1))),
        }
        oracle = self.momentofF_oracle(spec, alpha, T)
        if oracle is not None:
            report.meta["oracle"] = oracle
            checks["oracle"] = math.isfinite(oracle) and abs(mean[0] - oracle) <= 3.0 * ci[0] + 0.05 * oracle
        report.checks = checks
        return report

    def _increment_tests(self, increments: np.ndarray, variance: float):
        """KS test of the standardised increments against N(0, 1) and a 99% chi-square interval of their variance"""
        scaled = increments / math.sqrt(variance)
        dof = scaled.size - 1
        if dof < 1:
            raise VerificationError("the normality test needs at least two increments")
        ks = stats.kstest(scaled, "norm")
        sample_var = float(np.var(scaled, ddof=1))
        lo = dof * sample_var / stats.chi2.ppf(0.995, dof)
        hi = dof * sample_var / stats.chi2.ppf(0.005, dof)
        summary = {"count": int(scaled.size), "ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue),
                   "variance": sample_var, "variance_ci": [float(lo), float(hi)]}
        if ks.pvalue < 0.01:
            logger.warning(f"Increments fail the KS normality test (p={ks.pvalue:.3g})")
        return summary, bool(ks.pvalue >= 0.01)

    def momentofF_oracle(self, spec: Any, alpha: float, T: float) -> Optional[float]:
        """Closed forms: 1 for F = √κ·x, cos(T√(2α))^(-1/2) for F = t·x"""
        if spec.custom is not None:
            return None
        if spec.F == "linear":
            return 1.0
        if spec.F == "t_pow_p" and spec.p == 1.0:
            arg = T * math.sqrt(2.0 * alpha)
            return math.cos(arg) ** -0.5 if arg < math.pi / 2 else float("inf")
        return None

    def grid_tail_prob(self, spec: Any, theta: float, b_target: float, seeds: Sequence[int], grid: TimeGrid,
                       m_levels: Sequence[int] = (2, 7), t_list: Optional[Sequence[float]] = None,
                       cfg: Optional[FlowConfig] = None, threads: Optional[int] = None,
                       min_exceedances: Optional[int] = None) -> TailTable:
        """P[|f'_t(iy + U_t)| ≥ y^(−θ)] on y = 2^(−m) with the fitted slope of log P against log y"""
        if not 0 < theta < 1:
            raise VerificationError(f"theta must lie in (0, 1), got {theta}")
        min_exceedances = settings.MIN_TAIL_EXCEEDANCES if min_exceedances is None else min_exceedances
        lo, hi = m_levels
        ms = list(range(lo, hi + 1))
        ys = np.array([2.0 ** -m for m in ms])
        ks = self._anchors(grid, t_list or [grid.T])
        anchors = np.repeat(ks, len(ys))
        points = np.tile(1j * ys, len(ks))
        thresholds = np.tile(ys ** -theta, len(ks))

        def work(chunk):
            batch = driver_service.sample_batch(spec, grid, chunk)
            res = flow_service.sweep(batch.values, grid.dt, anchors, points, cfg, derivative=True)
            hits = np.abs(res.fprime) >= thresholds
            return hits.reshape(len(chunk), len(ks), len(ys)).sum(axis=(0, 1))

        counts = np.sum(job_service.map_ordered(work, _chunks(seeds), threads), axis=0)
        trials = len(seeds) * len(ks)
        table = TailTable(theta=theta, b_target=b_target)
        for m, y, c in zip(ms, ys, counts):
            table.rows.append({"m": m, "y": float(y), "exceedances": int(c), "count": trials,
                               "prob": float(c) / trials})
        fit_levels = [i for i, c in enumerate(counts) if c >= min_exceedances]
        table.fitted_levels = [ms[i] for i in fit_levels]
        if len(fit_levels) >= 2:
            fit = stats.linregress(np.log(ys[fit_levels]), np.log(counts[fit_levels] / trials))
            table.slope = float(fit.slope)
        elif not np.any(counts):
            table.notes.append("no exceedances at any level")
        else:
            table.notes.append(f"fewer than two levels with >= {min_exceedances} exceedances; no slope fitted")
        return table

    def qv_statistics(self, spec: Any, grid: TimeGrid, t: float, seeds: Sequence[int],
                      depth: Optional[int] = None, min_stride: Optional[int] = None,
                      threads: Optional[int] = None) -> MomentReport:
        """Mean of [U]^{π_l}_t over seeds per partition level, against κ·t for Brownian drivers"""
        k = self._anchors(grid, [t])[0]
        try:
            parts = pathint_service.dyadic_partitions(grid.n, depth, min_stride)
        except PathIntegralError as e:
            raise VerificationError(str(e)) from e

        def work(chunk):
            batch = driver_service.sample_batch(spec, grid, chunk)
            brackets = RunningMoments.from_samples(pathint_service.terminal_brackets(batch.values, parts, k))
            return brackets, np.diff(batch.values[:, :k + 1], axis=1).ravel()[:KS_SAMPLE_SIZE]

        results = job_service.map_ordered(work, _chunks(seeds), threads)
        moments = _merge([r[0] for r in results])
        increments = np.concatenate([r[1] for r in results])[:KS_SAMPLE_SIZE]
        ci = moments.ci()
        report = MomentReport(name="qv", b=None, count=moments.count,
                              meta={"partitions": parts.to_dict(), "t": float(grid.points[k])})
        for level, mesh in enumerate(parts.mesh_steps()):
            report.entries.append(MomentEntry(t=float(grid.points[k]), y=mesh * grid.dt,
                                              mean=float(moments.mean[level]), ci=float(ci[level]),
                                              count=moments.count))
        checks = {"finite": bool(np.all(np.isfinite(moments.mean)))}
        declared = spec.declared_kappa(grid.T) if spec.kind in ("brownian",) else None
        if declared:
            target = declared * float(grid.points[k])
            report.meta["target"] = target
            checks["within_3_percent"] = abs(float(moments.mean[-1]) - target) <= 0.03 * target
            summary, normal = self._increment_tests(increments, declared * grid.dt)
            report.meta["increments"] = summary
            checks["increments_normal"] = normal
        report.checks = checks
        return report


# Global service instance
montecarlo_service = MonteCarloService()
