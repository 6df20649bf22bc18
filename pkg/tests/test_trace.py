"""
Tests for trace extraction, regularity norms and the continuity experiment
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.models import TimeGrid
from app.schemas import TraceConfig
from app.services.driver_service import driver_service
from app.services.trace_service import TRACE_FLOW, TraceError, trace_service

FINE = TraceConfig(tol=1e-7)


@pytest.fixture
def zero_trace(zero_driver):
    return trace_service.extract_trace(zero_driver, FINE)


class TestZeroDriver:
    def test_trace_is_the_vertical_slit(self, zero_trace):
        assert zero_trace.all_converged
        assert zero_trace.points[0] == 0
        assert trace_service.zero_trace_error(zero_trace) <= 1e-3

    def test_default_tolerance_is_close_enough(self, zero_driver):
        trace = trace_service.extract_trace(zero_driver)
        assert trace_service.zero_trace_error(trace) <= 1e-3

    def test_half_holder_norm(self, zero_trace):
        assert trace_service.holder_half_norm(zero_trace) == pytest.approx(2.0, rel=1e-2)

    def test_square_root_reparametrisation(self, zero_trace):
        assert trace_service.sqrt_reparam_lip(zero_trace) == pytest.approx(2.0, abs=1e-2)

    def test_regularity_report(self, zero_trace):
        report = trace_service.regularity_report(zero_trace)
        assert report.excluded_points == 0
        assert report.sigma_hat == pytest.approx(2.0, rel=1e-2)
        assert report.c_hat == pytest.approx(0.0, abs=1e-6)
        assert report.min_gap > 0
        assert report.pvar["p"] == pytest.approx(1.1)
        # a straight segment: the p-variation is the end-to-end distance
        assert report.pvar["value"] == pytest.approx(2.0, rel=1e-2)

    def test_certificates(self, zero_driver, zero_trace):
        certs = trace_service.certificates(zero_trace, zero_driver)
        assert certs["koebe_ok"]
        assert certs["finite_energy_ok"]
        assert "continuity_max_ratio" in certs

    def test_cone(self, zero_driver):
        report = trace_service.cone_check(zero_driver, [1.0, 0.1], [0.25, 1.0], TRACE_FLOW)
        assert report.passed
        assert report.sigma_hat >= 2.0 - 1e-6
        assert report.c_hat == pytest.approx(0.0, abs=1e-9)


class TestSymmetry:
    @given(st.floats(min_value=-3.0, max_value=3.0, allow_nan=False))
    @settings(max_examples=8, deadline=None)
    def test_reflected_driver_gives_mirrored_trace(self, c):
        grid = TimeGrid(T=1.0, n=128)
        h = driver_service.make_finite_energy(np.full(grid.n, c), grid)
        a = trace_service.extract_trace(h)
        b = trace_service.extract_trace(driver_service.reflect_driver(h))
        assert trace_service.mirror_distance(a, b) <= 1e-6

    def test_mirror_needs_the_same_grid(self, zero_trace):
        other = trace_service.extract_trace(driver_service.make_finite_energy(np.zeros(64), TimeGrid(T=1.0, n=64)))
        with pytest.raises(TraceError):
            trace_service.mirror_distance(zero_trace, other)


class TestPartialTraces:
    def test_unconverged_points_are_flagged(self, linear_driver):
        trace = trace_service.extract_trace(linear_driver, TraceConfig(tol=1e-300, k_max=2))
        assert not trace.all_converged
        assert trace.converged[0]
        assert len(trace.points) == linear_driver.grid.n + 1
        with pytest.raises(TraceError):
            trace_service.holder_half_norm(trace)

    def test_pvariation_needs_p_at_least_one(self, zero_trace):
        with pytest.raises(TraceError):
            trace_service.pvar_norm(zero_trace, 0.5)


class TestCone:
    def test_steep_driver_is_skipped(self, make_fe, grid):
        steep = make_fe(grid, (0.0, 0.0), (0.5, 12.0))
        report = trace_service.cone_check(steep, [1.0], [1.0])
        assert report.skipped
        assert not report.precondition_ok
        assert not report.passed
        assert report.notes

    def test_times_must_be_positive(self, zero_driver):
        with pytest.raises(TraceError):
            trace_service.cone_check(zero_driver, [1.0], [0.0])


class TestContinuity:
    def test_trace_distance_shrinks_with_the_driver(self, zero_driver):
        ladder = trace_service.perturbation_ladder(zero_driver, [2, 4, 8, 16])
        table = trace_service.continuity_experiment(zero_driver, ladder, cfg=FINE)
        assert not table.refused
        assert [r["driver_distance"] for r in table.rows] == pytest.approx([0.5, 0.25, 0.125, 0.0625])
        assert table.decay_ok()["sup"]
        assert table.passed

    def test_rough_driver_is_refused(self, brownian_path):
        table = trace_service.continuity_experiment(brownian_path, trace_service.perturbation_ladder(brownian_path, [2]))
        assert table.refused
        assert "exceeds" in table.reason
        assert not table.passed

    def test_ladder_shifts(self, zero_driver):
        shifted = trace_service.perturbation_ladder(zero_driver, [4])[0]
        assert shifted.at(1.0) == pytest.approx(0.25)


class TestHolderFit:
    def test_recovers_exponential_growth(self):
        slopes = [0.0, 0.5, 1.0, 2.0]
        norms = [math.exp(0.7 + 0.3 * c * c) for c in slopes]
        fit = trace_service.holder_fit(slopes, norms)
        assert fit["C1"] == pytest.approx(0.7, abs=1e-9)
        assert fit["C2"] == pytest.approx(0.3, abs=1e-9)
        assert fit["C1_envelope"] == pytest.approx(0.7, abs=1e-9)
