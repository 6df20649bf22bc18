"""
Tests for dyadic partitions, Föllmer brackets and pathwise integrals
"""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.models import TimeGrid
from app.schemas import BrownianSpec
from app.services.driver_service import driver_service
from app.services.flow_service import flow_service
from app.services.pathint_service import PathIntegralError, pathint_service


class TestPartitions:
    def test_dyadic_levels(self):
        parts = pathint_service.dyadic_partitions(256, min_stride=4)
        assert parts.depth == 6
        assert parts.mesh_steps() == [128, 64, 32, 16, 8, 4]
        assert parts.is_nested()

    def test_explicit_depth(self):
        parts = pathint_service.dyadic_partitions(1024, depth=3)
        assert parts.mesh_steps() == [512, 256, 128]

    def test_depth_too_large(self):
        with pytest.raises(PathIntegralError):
            pathint_service.dyadic_partitions(256, depth=7, min_stride=4)

    def test_grid_without_dyadic_partition(self):
        with pytest.raises(PathIntegralError):
            pathint_service.dyadic_partitions(6, min_stride=4)

    @given(st.integers(min_value=1, max_value=256))
    @settings(max_examples=40, deadline=None)
    def test_reflection_keeps_nesting(self, k):
        parts = pathint_service.dyadic_partitions(256, min_stride=4)
        reflected = pathint_service.reflect(parts, k)
        assert reflected.n == k
        assert reflected.is_nested()

    def test_reflection_at_the_horizon_is_the_same_partition(self):
        parts = pathint_service.dyadic_partitions(256, min_stride=4)
        reflected = pathint_service.reflect(parts, 256)
        for a, b in zip(parts.levels, reflected.levels):
            np.testing.assert_array_equal(a, b)

    def test_reflect_outside_range(self):
        parts = pathint_service.dyadic_partitions(256, min_stride=4)
        with pytest.raises(PathIntegralError):
            pathint_service.reflect(parts, 300)


class TestBrackets:
    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=25, deadline=None)
    def test_gradient_form(self, seed):
        grid = TimeGrid(T=1.0, n=256)
        U = driver_service.sample_driver(BrownianSpec(kappa=1.0), grid, seed)
        parts = pathint_service.dyadic_partitions(grid.n)
        sums = pathint_service.follmer_integral(U, U, parts)
        brackets = pathint_service.terminal_brackets(U.values, parts, grid.n)[0]
        expected = 0.5 * U.values[-1] ** 2 - 0.5 * brackets
        np.testing.assert_allclose(sums.values, expected, atol=1e-10)

    @given(st.integers(min_value=1, max_value=256))
    @settings(max_examples=40, deadline=None)
    def test_reversal_preserves_brackets(self, k):
        grid = TimeGrid(T=1.0, n=256)
        U = driver_service.sample_driver(BrownianSpec(kappa=1.0, seed=3), grid)
        parts = pathint_service.dyadic_partitions(grid.n)
        beta = driver_service.time_reverse(U, grid.points[k])
        forward = pathint_service.terminal_brackets(U.values, parts, k)
        backward = pathint_service.terminal_brackets(beta.values, pathint_service.reflect(parts, k), k)
        np.testing.assert_allclose(backward, forward, atol=1e-12)

    def test_bracket_path_matches_terminal_values(self, brownian_path):
        parts = pathint_service.dyadic_partitions(brownian_path.grid.n)
        qv = pathint_service.follmer_qv(brownian_path, parts, 1.0)
        terminal = pathint_service.terminal_brackets(brownian_path.values, parts, brownian_path.grid.n)[0]
        np.testing.assert_allclose(qv.at_levels(), terminal, rtol=1e-12)
        assert np.all(np.diff(qv.finest) >= 0)

    def test_brownian_bracket_slope(self, brownian_path):
        parts = pathint_service.dyadic_partitions(brownian_path.grid.n)
        qv = pathint_service.follmer_qv(brownian_path, parts, 1.0, min_window=0.25)
        assert qv.extrapolated == pytest.approx(1.0, abs=0.35)
        assert 0.5 < qv.kappa_hat < 2.5

    def test_finite_energy_bracket_is_small(self, piecewise_driver):
        parts = pathint_service.dyadic_partitions(piecewise_driver.grid.n)
        brackets = pathint_service.terminal_brackets(piecewise_driver.values, parts, piecewise_driver.grid.n)[0]
        energy = piecewise_driver.energy_at(1.0)
        for value, steps in zip(brackets, parts.mesh_steps()):
            assert value <= steps * piecewise_driver.grid.dt * energy + 1e-15

    def test_off_grid_time(self, brownian_path):
        parts = pathint_service.dyadic_partitions(brownian_path.grid.n)
        with pytest.raises(PathIntegralError):
            pathint_service.follmer_qv(brownian_path, parts, 0.3)


class TestIntegrals:
    def test_riemann_stieltjes_of_constants(self):
        assert pathint_service.riemann_stieltjes(np.ones(11), np.full(10, 2.0), 0.1) == pytest.approx(2.0)

    def test_rough_sum_adds_half_bracket(self, brownian_path):
        parts = pathint_service.dyadic_partitions(brownian_path.grid.n)
        ones = np.ones(brownian_path.grid.n + 1)
        rough = pathint_service.rough_integral(np.zeros_like(ones), ones, brownian_path, parts)
        brackets = pathint_service.terminal_brackets(brownian_path.values, parts, brownian_path.grid.n)[0]
        np.testing.assert_allclose(rough.values, 0.5 * brackets, rtol=1e-12)

    def test_integral_report_on_reversed_flow(self, brownian_path):
        beta = driver_service.time_reverse(brownian_path, 1.0)
        flow = flow_service.backward_flow(beta, 1.0)
        parts = pathint_service.reflect(pathint_service.dyadic_partitions(brownian_path.grid.n), beta.anchor_index)
        report = pathint_service.integral_report(flow, parts)
        assert len(report.follmer.values) == parts.depth
        assert report.gsq_dr > 0
        assert "cauchy_certificate" in report.to_dict()["M_pi"]


class TestRepresentation:
    def test_finite_energy_identity(self, linear_driver):
        report = pathint_service.check_representation(linear_driver, 1j, 1.0)
        assert report.passed
        assert report.max_gap < 1e-4

    def test_finite_energy_gap_shrinks_with_the_grid(self):
        gaps = []
        for n in (64, 128, 256):
            grid = TimeGrid(T=1.0, n=n)
            h = driver_service.make_finite_energy(np.ones(n), grid)
            gaps.append(pathint_service.check_representation(h, 0.5j, 1.0).max_gap)
        for coarse, fine in zip(gaps[:-1], gaps[1:]):
            assert fine < 1e-11 or coarse / fine >= 2.0

    def test_brownian_identity(self, brownian_path):
        report = pathint_service.check_representation(brownian_path, 1j, 1.0)
        entry = report.entries[0]
        assert entry.extra["level_gaps"][-1] < 1e-2
        assert report.passed
        assert report.meta["anchor_resolution"] == pytest.approx(4 / 1024)
        assert len(entry.extra["level_rhs"]) == len(entry.extra["mesh_steps"])

    def test_small_height_on_a_coarse_grid_is_flagged(self, brownian_path):
        report = pathint_service.check_representation(brownian_path, 0.1j, 1.0)
        assert report.meta["anchor_resolution"] > 0.008
        assert any("under-resolved" in note for note in report.notes)

    @pytest.mark.slow
    def test_brownian_small_height(self):
        # n = 2^16 puts the finest mesh at 0.006·y² for y = 0.1
        grid = TimeGrid(T=1.0, n=65536)
        spec = BrownianSpec(kappa=1.0)
        reports = [
            pathint_service.check_representation(driver_service.sample_driver(spec, grid, seed), 0.1j, 1.0)
            for seed in range(8)
        ]
        assert not any("under-resolved" in note for r in reports for note in r.notes)
        assert sum(r.max_gap < 1e-2 for r in reports) >= 7
        level_gaps = np.array([r.entries[0].extra["level_gaps"] for r in reports])
        rms = np.sqrt(np.mean(np.square(level_gaps), axis=0))
        assert rms[-1] < 1e-2
        assert rms[-1] <= rms[-2] <= rms[-3]

    def test_tolerance_override(self, linear_driver):
        report = pathint_service.check_representation(linear_driver, 1j, 1.0, tol=0.5)
        assert report.slack == 0.5

    def test_off_grid_anchor(self, linear_driver):
        with pytest.raises(PathIntegralError):
            pathint_service.check_representation(linear_driver, 1j, 0.3)
