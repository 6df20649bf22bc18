"""
Tests for driver construction, sampling, reversal and decomposition
"""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.models import BrownianPath, FiniteEnergyDriver, TimeGrid
from app.schemas import BrownianSpec, FiniteEnergySpec, FunctionalSpec, HPerturbedSpec, OUSpec, VariableKappaSpec
from app.services.driver_service import DriverError, driver_service


class TestFiniteEnergy:
    def test_zero_driver_is_identically_zero(self, zero_driver):
        assert isinstance(zero_driver, FiniteEnergyDriver)
        assert not np.any(zero_driver.values)
        assert zero_driver.energy[-1] == 0.0

    def test_linear_driver_values_and_energy(self, linear_driver):
        t = linear_driver.times
        np.testing.assert_allclose(linear_driver.values, t, atol=1e-12)
        np.testing.assert_allclose(linear_driver.energy, t, atol=1e-12)

    def test_piecewise_slope(self, piecewise_driver):
        assert piecewise_driver.at(0.5) == pytest.approx(0.5, abs=1e-12)
        assert piecewise_driver.at(1.0) == pytest.approx(-0.5, abs=1e-12)
        # energy: 1² · ½ + 2² · ½
        assert piecewise_driver.energy_at(1.0) == pytest.approx(2.5, abs=1e-12)

    def test_hdot_length_mismatch(self, grid):
        with pytest.raises(DriverError):
            driver_service.make_finite_energy(np.ones(grid.n - 1), grid)

    def test_steps_must_start_at_zero(self):
        with pytest.raises(ValueError):
            FiniteEnergySpec(hdot_steps=[(0.25, 1.0)])


class TestSampling:
    def test_same_seed_same_path(self, grid):
        spec = BrownianSpec(kappa=1.0)
        a = driver_service.sample_driver(spec, grid, 3)
        b = driver_service.sample_driver(spec, grid, 3)
        np.testing.assert_array_equal(a.values, b.values)

    def test_different_seed_different_path(self, grid):
        spec = BrownianSpec(kappa=1.0)
        a = driver_service.sample_driver(spec, grid, 3)
        b = driver_service.sample_driver(spec, grid, 4)
        assert not np.array_equal(a.values, b.values)

    def test_negative_seed_rejected(self, grid):
        with pytest.raises(DriverError):
            driver_service.sample_driver(BrownianSpec(), grid, -1)

    def test_brownian_quadratic_variation(self):
        grid = TimeGrid(T=1.0, n=4096)
        path = driver_service.sample_driver(BrownianSpec(kappa=1.5, seed=11), grid)
        assert isinstance(path, BrownianPath)
        assert np.sum(np.diff(path.values) ** 2) == pytest.approx(1.5, rel=0.1)

    def test_variable_kappa_steps(self, grid):
        spec = VariableKappaSpec(kappa_steps=[(0.0, 1.0), (0.5, 1.9)])
        kappas = driver_service.kappa_on_steps(spec.kappa_steps, grid)
        assert kappas[0] == 1.0
        assert kappas[-1] == 1.9
        assert spec.declared_kappa(1.0) == 1.9
        assert spec.declared_kappa(0.5) == 1.0

    def test_sample_batch_rows_match_single_samples(self, grid):
        spec = OUSpec(**{"lambda": 1.0})
        batch = driver_service.sample_batch(spec, grid, [1, 2, 3])
        for row, seed in enumerate([1, 2, 3]):
            np.testing.assert_array_equal(batch.values[row], driver_service.sample_driver(spec, grid, seed).values)
        assert batch.drift.shape == (3, grid.n)

    def test_functional_driver_starts_at_zero(self, grid):
        path = driver_service.sample_driver(FunctionalSpec(F="t_log1p_x2", seed=5), grid)
        assert path.values[0] == 0.0
        assert path.latent is not None

    def test_read_values_checks_length(self, grid):
        with pytest.raises(DriverError):
            driver_service.read_values(None, grid, [0.0] * grid.n)


class TestReversal:
    @given(st.integers(min_value=1, max_value=256))
    @settings(max_examples=30, deadline=None)
    def test_reversal_is_an_involution(self, k):
        grid = TimeGrid(T=1.0, n=256)
        U = driver_service.sample_driver(BrownianSpec(kappa=1.0, seed=1), grid)
        t = grid.points[k]
        beta = driver_service.time_reverse(U, t)
        back = driver_service.time_reverse(beta, beta.grid.T)
        np.testing.assert_allclose(back.values, U.values[: k + 1], atol=1e-12)

    def test_reversed_values(self, linear_driver):
        beta = driver_service.time_reverse(linear_driver, 0.5)
        assert beta.anchor == 0.5
        assert beta.anchor_index == 128
        np.testing.assert_allclose(beta.values, beta.times, atol=1e-12)

    @pytest.mark.parametrize("t", [0.0, 0.3, 2.0])
    def test_bad_anchor(self, linear_driver, t):
        with pytest.raises(DriverError):
            driver_service.time_reverse(linear_driver, t)

    def test_reflect_driver(self, piecewise_driver):
        mirrored = driver_service.reflect_driver(piecewise_driver)
        assert isinstance(mirrored, FiniteEnergyDriver)
        np.testing.assert_allclose(mirrored.values, -piecewise_driver.values)


class TestDecomposition:
    def test_brownian_has_no_drift(self, brownian_spec, brownian_path):
        dec = driver_service.decompose(brownian_spec, brownian_path, 1.0)
        assert dec.energy == 0.0
        np.testing.assert_allclose(dec.N.values, dec.beta.values)

    def test_h_perturbed_drift_is_h(self, grid):
        spec = HPerturbedSpec(inner=BrownianSpec(kappa=1.0), h=FiniteEnergySpec(hdot_steps=[(0.0, 1.0)]), seed=2)
        path = driver_service.sample_driver(spec, grid)
        dec = driver_service.decompose(spec, path, 0.5)
        assert dec.energy == pytest.approx(0.5, abs=1e-12)
        np.testing.assert_allclose(dec.N.values + dec.A.values, dec.beta.values, atol=1e-12)

    def test_ou_parts_add_up(self, grid):
        spec = OUSpec(**{"lambda": 1.0}, seed=4)
        path = driver_service.sample_driver(spec, grid)
        dec = driver_service.decompose(spec, path, 1.0)
        np.testing.assert_allclose(dec.N.values + dec.A.values, dec.beta.values, atol=1e-12)

    def test_functional_ito_residual_is_small(self):
        grid = TimeGrid(T=1.0, n=1024)
        spec = FunctionalSpec(F="t_pow_p", p=1.0, seed=9)
        path = driver_service.sample_driver(spec, grid)
        dec = driver_service.decompose(spec, path, 1.0)
        assert dec.ito_residual < 1e-2


class TestPathSurgery:
    def test_split_reassembles(self, piecewise_driver):
        head, tail = driver_service.split_driver(piecewise_driver, 0.25)
        assert head.grid.n == 64
        assert tail.grid.n == 192
        np.testing.assert_allclose(tail.values + head.values[-1], piecewise_driver.values[64:], atol=1e-12)

    def test_split_must_be_interior(self, piecewise_driver):
        with pytest.raises(DriverError):
            driver_service.split_driver(piecewise_driver, 1.0)

    def test_zero_driver_is_one_piece(self, zero_driver):
        assert driver_service.concatenate_pieces(zero_driver) == [(0.0, 1.0)]

    def test_steep_driver_is_split(self, make_fe, grid):
        steep = make_fe(grid, (0.0, 0.0), (0.5, 12.0))
        assert driver_service.holder_half_seminorm(steep) > 4.0
        assert len(driver_service.concatenate_pieces(steep)) > 1
