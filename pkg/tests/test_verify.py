"""
Tests for the estimate constants and the pathwise estimate checks
"""
import pytest
from hypothesis import given, strategies as st

from app.models import TimeGrid
from app.schemas import BrownianSpec, FiniteEnergySpec
from app.services.driver_service import driver_service
from app.services.flow_service import flow_service
from app.services.pathint_service import pathint_service
from app.services.verify_service import VerificationError, constants_for_kappa, verify_service


class TestConstants:
    def test_kappa_one(self):
        c = constants_for_kappa(1.0)
        assert c.eps == pytest.approx(0.25)
        assert c.c_eps == pytest.approx(1.25)
        assert c.b == pytest.approx(2.25)
        assert c.p == pytest.approx(10 / 9)
        assert c.c0 == pytest.approx(1.5)
        assert c.q == pytest.approx(10.0)
        assert c.alpha == pytest.approx(22.5)

    @given(st.floats(min_value=0.05, max_value=1.95))
    def test_chain_closes_below_two(self, kappa):
        c = constants_for_kappa(kappa)
        assert c.b > 2
        assert c.p > 1
        assert c.p * c.b / 2 == pytest.approx(c.c_eps)
        assert c.c_eps <= c.c0

    @pytest.mark.parametrize("kappa", [2.0, 2.5, 0.0, -1.0])
    def test_outside_the_range(self, kappa):
        with pytest.raises(VerificationError):
            constants_for_kappa(kappa)

    def test_to_dict_carries_derived_values(self):
        data = constants_for_kappa(1.0).to_dict()
        assert data["q"] == pytest.approx(10.0)
        assert data["alpha"] == pytest.approx(22.5)


class TestCameronMartin:
    def test_bound_holds_on_finite_energy(self, piecewise_driver):
        report = verify_service.check_cm_bound(piecewise_driver, [1.0, 0.1], [0.5, 1.0], x_rays=[-1.0, 2.0])
        assert report.passed
        assert len(report.entries) == 2 * 2 * 3
        assert {e.extra["bound"] for e in report.entries} == {"cm", "finer"}

    def test_zero_driver_margin(self, zero_driver):
        report = verify_service.check_cm_bound(zero_driver, [1.0], [1.0])
        # |f'| = 1/√5 against exp(0) = 1
        assert report.min_margin == pytest.approx(5 ** 0.5, rel=1e-5)

    def test_needs_finite_energy(self, brownian_path):
        with pytest.raises(VerificationError):
            verify_service.check_cm_bound(brownian_path, [1.0], [1.0])


class TestKeyEstimate:
    def test_zero_driver(self, zero_driver):
        report = verify_service.check_keyest(zero_driver, 1.0, 1.0)
        assert report.passed
        assert report.entries[0].rhs == pytest.approx(1.0)

    def test_declared_kappa_gate(self, brownian_path):
        report = verify_service.check_keyest(brownian_path, 1.0, 1.0, declared_kappa=2.5)
        assert report.gated
        assert not report.entries
        assert not report.passed
        assert "kappa must be < 2" in report.notes[0]

    @pytest.mark.slow
    def test_brownian_samples(self):
        grid = TimeGrid(T=1.0, n=512)
        spec = BrownianSpec(kappa=1.0)
        results = [
            verify_service.check_keyest(driver_service.sample_driver(spec, grid, seed), 1.0, 1.0,
                                        declared_kappa=1.0).passed
            for seed in range(10)
        ]
        assert sum(results) >= 9

    @pytest.mark.slow
    def test_brownian_near_two_at_small_height(self):
        # mesh/y² = 4/16384/0.01 stays under the resolution limit
        grid = TimeGrid(T=1.0, n=16384)
        spec = BrownianSpec(kappa=1.9)
        reports = [
            verify_service.check_keyest(driver_service.sample_driver(spec, grid, seed), 0.1, 1.0,
                                        declared_kappa=1.9)
            for seed in range(20)
        ]
        assert all(r.meta["anchor_resolution"] <= 0.025 for r in reports)
        assert not any("under-resolved" in note for r in reports for note in r.notes)
        assert sum(r.passed for r in reports) >= 19

    def test_coarse_grid_is_flagged(self, brownian_path):
        report = verify_service.check_keyest(brownian_path, 0.1, 1.0, declared_kappa=1.0)
        assert report.meta["anchor_resolution"] > 0.025
        assert any("under-resolved" in note for note in report.notes)

    def test_off_grid_time(self, zero_driver):
        with pytest.raises(VerificationError):
            verify_service.check_keyest(zero_driver, 1.0, 0.3)


class TestKey1:
    def test_zero_driver(self, zero_driver):
        dec = driver_service.decompose(FiniteEnergySpec(), zero_driver, 1.0)
        report = verify_service.check_key1(zero_driver, dec, constants_for_kappa(1.0), 1.0)
        assert report.passed
        assert report.entries[0].rhs == pytest.approx(1.0)

    def test_brownian_with_drift(self, grid):
        spec = BrownianSpec(kappa=1.0, seed=5)
        U = driver_service.sample_driver(spec, grid)
        dec = driver_service.decompose(spec, U, 1.0)
        report = verify_service.check_key1(U, dec, constants_for_kappa(1.0), 1.0)
        assert report.entries
        assert report.meta["constants"]["b"] == pytest.approx(2.25)
        assert report.meta["anchor_resolution"] == pytest.approx(4 / 256)
        assert not report.notes

    @pytest.mark.slow
    def test_brownian_near_two_at_small_height(self):
        grid = TimeGrid(T=1.0, n=16384)
        spec = BrownianSpec(kappa=1.9)
        constants = constants_for_kappa(1.9)
        passes = []
        for seed in range(20):
            U = driver_service.sample_driver(spec, grid, seed)
            report = verify_service.check_key1(U, driver_service.decompose(spec, U, 1.0), constants, 0.1)
            assert report.meta["anchor_resolution"] <= 0.025
            passes.append(report.passed)
        assert sum(passes) >= 19


class TestSteps:
    def test_young_split(self, linear_driver):
        dec = driver_service.decompose(FiniteEnergySpec(hdot_steps=[(0.0, 1.0)]), linear_driver, 1.0)
        flow = flow_service.backward_flow(dec.beta, 1.0)
        report = verify_service.check_young_split(flow, dec, 0.25)
        assert report.passed
        assert report.entries[0].extra["energy_A"] == pytest.approx(1.0)

    def test_young_split_needs_positive_eps(self, linear_driver):
        dec = driver_service.decompose(FiniteEnergySpec(hdot_steps=[(0.0, 1.0)]), linear_driver, 1.0)
        flow = flow_service.backward_flow(dec.beta, 1.0)
        with pytest.raises(VerificationError):
            verify_service.check_young_split(flow, dec, 0.0)

    def test_reduction_chain(self, brownian_path):
        beta = driver_service.time_reverse(brownian_path, 1.0)
        flow = flow_service.backward_flow(beta, 1.0)
        parts = pathint_service.reflect(pathint_service.dyadic_partitions(brownian_path.grid.n), beta.anchor_index)
        report = verify_service.check_reduction_chain(flow, parts, constants_for_kappa(1.0))
        assert report.passed
        assert [e.extra["step"] for e in report.entries] == ["constants", "dropped_term"]
        assert "replacement_holds" in report.meta
