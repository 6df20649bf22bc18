"""
Tests for the Monte Carlo checks and their chunked statistics
"""
import math

import numpy as np
import pytest

from app.models import TimeGrid
from app.schemas import BrownianSpec, FiniteEnergySpec, FunctionalSpec
from app.services.montecarlo_service import KS_SAMPLE_SIZE, RunningMoments, montecarlo_service
from app.services.verify_service import VerificationError, constants_for_kappa


class TestRunningMoments:
    def test_merge_matches_pooled_samples(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(40, 3)), rng.normal(size=(25, 3))
        merged = RunningMoments.from_samples(a).merge(RunningMoments.from_samples(b))
        pooled = RunningMoments.from_samples(np.vstack((a, b)))
        assert merged.count == 65
        np.testing.assert_allclose(merged.mean, pooled.mean, atol=1e-12)
        np.testing.assert_allclose(merged.m2, pooled.m2, atol=1e-10)

    def test_single_sample_has_no_interval(self):
        assert np.all(np.isinf(RunningMoments.from_samples(np.ones((1, 2))).ci()))


class TestMoment:
    def test_zero_driver_closed_form(self):
        grid = TimeGrid(T=1.0, n=256)
        report = montecarlo_service.mc_moment(FiniteEnergySpec(), constants_for_kappa(1.0), [1.0, 0.1], [1.0],
                                              range(4), grid)
        for entry in report.entries:
            expected = (entry.y / math.sqrt(entry.y ** 2 + 4.0)) ** 2.25
            assert entry.mean == pytest.approx(expected, rel=1e-4)
            assert entry.proxy_mean == pytest.approx(1.0)
        assert report.count == 4
        assert "y_stable" not in report.checks
        assert report.checks["no_growth_below_largest_y"]
        assert report.meta["max_min_ratio"][0] > 3.0
        assert report.passed

    def test_y_stability_uses_the_max_min_ratio(self):
        grid = TimeGrid(T=1.0, n=64)
        report = montecarlo_service.mc_moment(BrownianSpec(kappa=1.0), constants_for_kappa(1.0), [1.0, 0.5],
                                              [1.0], range(50), grid)
        assert "no_growth_below_largest_y" not in report.checks
        assert report.checks["y_stable"] == (report.meta["max_min_ratio"][0] < 3.0)

    @pytest.mark.slow
    def test_brownian_moment_is_stable_in_y(self):
        grid = TimeGrid(T=1.0, n=1024)
        report = montecarlo_service.mc_moment(BrownianSpec(kappa=1.0), constants_for_kappa(1.0),
                                              [1.0, 0.1, 0.01], [1.0], range(10_000), grid, threads=4)
        assert report.count == 10_000
        assert [e.y for e in report.entries] == [1.0, 0.1, 0.01]
        assert report.checks["finite"]
        assert report.checks["ci_width"]
        assert report.meta["max_min_ratio"][0] < 3.0
        assert report.checks["y_stable"]
        for entry in report.entries:
            assert entry.proxy_mean <= 1.0 + 3.0 * entry.proxy_ci
        assert report.passed

    def test_thread_count_does_not_change_the_numbers(self):
        grid = TimeGrid(T=1.0, n=64)
        spec = BrownianSpec(kappa=1.0)
        args = (spec, constants_for_kappa(1.0), [1.0], [1.0], list(range(1100)), grid)
        one = montecarlo_service.mc_moment(*args, threads=1)
        three = montecarlo_service.mc_moment(*args, threads=3)
        assert one.entries[0].mean == three.entries[0].mean
        assert one.entries[0].ci == three.entries[0].ci
        assert one.count == 1100

    def test_anchor_off_the_partition(self):
        grid = TimeGrid(T=1.0, n=256)
        with pytest.raises(VerificationError):
            montecarlo_service.mc_moment(FiniteEnergySpec(), constants_for_kappa(1.0), [1.0], [0.5 + 1 / 256],
                                         range(2), grid)


class TestMomentOfF:
    @pytest.mark.slow
    def test_matches_the_closed_form(self):
        spec = FunctionalSpec(F="t_pow_p", p=1.0)
        report = montecarlo_service.check_momentofF(spec, 2.0, 0.25, range(2000), 256)
        assert report.meta["oracle"] == pytest.approx(math.cos(0.5) ** -0.5)
        assert report.checks["oracle"]
        assert report.passed
        assert [e.t for e in report.entries] == pytest.approx([0.25, 0.125, 0.0625])

    def test_linear_functional_oracle(self):
        assert montecarlo_service.momentofF_oracle(FunctionalSpec(F="linear"), 3.0, 1.0) == 1.0

    def test_oracle_blows_up(self):
        assert math.isinf(montecarlo_service.momentofF_oracle(FunctionalSpec(F="t_pow_p", p=1.0), 8.0, 1.0))

    def test_needs_a_functional_driver(self):
        with pytest.raises(VerificationError):
            montecarlo_service.check_momentofF(BrownianSpec(), 1.0, 1.0, range(10), 64)

    def test_ladder_must_divide_the_grid(self):
        with pytest.raises(VerificationError):
            montecarlo_service.check_momentofF(FunctionalSpec(F="t_pow_p"), 1.0, 0.25, range(10), 6)


class TestTail:
    def test_zero_driver_never_exceeds(self):
        grid = TimeGrid(T=1.0, n=64)
        table = montecarlo_service.grid_tail_prob(FiniteEnergySpec(), 0.9, 2.25, range(3), grid, m_levels=(2, 4))
        assert [r["m"] for r in table.rows] == [2, 3, 4]
        assert all(r["exceedances"] == 0 for r in table.rows)
        assert table.slope is None
        assert table.passed
        assert "no exceedances at any level" in table.notes

    def test_theta_range(self):
        with pytest.raises(VerificationError):
            montecarlo_service.grid_tail_prob(FiniteEnergySpec(), 1.0, 2.25, range(3), TimeGrid(T=1.0, n=64))


class TestQuadraticVariation:
    def test_brownian_bracket_mean(self):
        grid = TimeGrid(T=1.0, n=1024)
        report = montecarlo_service.qv_statistics(BrownianSpec(kappa=1.0), grid, 1.0, range(200))
        assert report.meta["target"] == pytest.approx(1.0)
        assert report.checks["within_3_percent"]
        assert report.count == 200

    def test_increments_look_gaussian(self):
        grid = TimeGrid(T=1.0, n=1024)
        report = montecarlo_service.qv_statistics(BrownianSpec(kappa=0.5), grid, 1.0, range(40))
        summary = report.meta["increments"]
        assert summary["count"] == KS_SAMPLE_SIZE
        assert summary["ks_statistic"] < 0.03
        lo, hi = summary["variance_ci"]
        assert lo < summary["variance"] < hi
        assert 0.9 < summary["variance"] < 1.1

    def test_off_grid_time(self):
        with pytest.raises(VerificationError):
            montecarlo_service.qv_statistics(BrownianSpec(), TimeGrid(T=1.0, n=64), 0.3, range(2))
