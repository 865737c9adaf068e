"""Path engine: simulation laws, change-of-measure identities, determinism."""

import dataclasses

import numpy as np
import pytest

from penpia import (
    BrownianBatch,
    EvaluationError,
    PathEnsemble,
    SimulationError,
    TimeGrid,
    ValidationError,
    derive_seed,
    girsanov_log_weights,
    load_ensemble,
    save_ensemble,
    simulate_controlled_forward,
    simulate_driftless,
)

from conftest import ConstantField as ConstZ
from conftest import make_lin_problem, make_vol_problem


class TestTimeGrid:
    def test_step_and_times(self):
        grid = TimeGrid(num_steps=4, horizon=2.0)
        assert grid.step == 0.5
        np.testing.assert_allclose(grid.times, [0.0, 0.5, 1.0, 1.5, 2.0])

    def test_validation(self):
        with pytest.raises(ValidationError):
            TimeGrid(num_steps=0, horizon=1.0)
        with pytest.raises(ValidationError):
            TimeGrid(num_steps=5, horizon=0.0)


class TestBrownianBatch:
    def test_reproducible_from_seed(self):
        grid = TimeGrid(num_steps=16, horizon=1.0)
        a = BrownianBatch.generate(64, grid, 2, seed=9)
        b = BrownianBatch.generate(64, grid, 2, seed=9)
        assert np.array_equal(a.increments, b.increments)
        c = BrownianBatch.generate(64, grid, 2, seed=10)
        assert not np.array_equal(a.increments, c.increments)

    def test_increment_variance(self):
        grid = TimeGrid(num_steps=10, horizon=1.0)
        batch = BrownianBatch.generate(20_000, grid, 1, seed=3)
        var = batch.increments.var()
        assert abs(var - grid.step) < 3 * grid.step * np.sqrt(2.0 / batch.increments.size)

    def test_needs_paths(self):
        grid = TimeGrid(num_steps=2, horizon=1.0)
        with pytest.raises(ValidationError):
            BrownianBatch.generate(0, grid, 1, seed=0)


class TestSimulateDriftless:
    def test_unit_vol_matches_cumsum(self):
        problem = make_lin_problem()
        grid = TimeGrid(num_steps=25, horizon=1.0)
        batch = BrownianBatch.generate(300, grid, 1, seed=11)
        ens = simulate_driftless(problem, grid, batch)
        expected = np.concatenate(
            [np.zeros((300, 1, 1)), np.cumsum(batch.increments, axis=1)], axis=1
        )
        assert np.array_equal(ens.states, expected)
        assert np.array_equal(ens.log_weights, np.zeros(300))

    def test_zero_vol_stays_put(self):
        problem = make_lin_problem(
            vol=lambda t, prefix, u: np.zeros((prefix.shape[0], 1, 1)),
            initial_state=np.array([0.7]),
            vol_bound=1.0,
        )
        grid = TimeGrid(num_steps=8, horizon=1.0)
        batch = BrownianBatch.generate(40, grid, 1, seed=2)
        ens = simulate_driftless(problem, grid, batch)
        assert np.array_equal(ens.states, np.full((40, 9, 1), 0.7))

    def test_terminal_variance(self):
        problem = make_lin_problem()
        grid = TimeGrid(num_steps=50, horizon=1.0)
        batch = BrownianBatch.generate(100_000, grid, 1, seed=5)
        ens = simulate_driftless(problem, grid, batch)
        var = ens.states[:, -1, 0].var(ddof=1)
        se = np.sqrt(2.0 / (batch.num_paths - 1))
        assert abs(var - 1.0) < 3 * se

    def test_ignores_drift_and_cost(self):
        grid = TimeGrid(num_steps=10, horizon=1.0)
        batch = BrownianBatch.generate(50, grid, 1, seed=7)
        plain = simulate_driftless(make_lin_problem(), grid, batch)
        other = simulate_driftless(
            make_lin_problem(
                drift=lambda t, prefix, u: 10.0 * np.ones((prefix.shape[0], 1)),
                running_cost=lambda t, prefix, u: np.full(prefix.shape[0], 99.0),
                drift_bound=10.0,
            ),
            grid,
            batch,
        )
        assert np.array_equal(plain.states, other.states)

    def test_worker_count_is_invisible(self):
        problem = make_lin_problem()
        grid = TimeGrid(num_steps=12, horizon=1.0)
        batch = BrownianBatch.generate(1000, grid, 1, seed=13)
        solo = simulate_driftless(problem, grid, batch, workers=1)
        pooled = simulate_driftless(problem, grid, batch, workers=4)
        assert np.array_equal(solo.states, pooled.states)

    def test_nonfinite_vol_names_step(self):
        def bad_vol(t, prefix, u):
            out = np.ones((prefix.shape[0], 1, 1))
            if t > 0.4:
                out[0] = np.nan
            return out

        problem = make_lin_problem(vol=bad_vol)
        grid = TimeGrid(num_steps=10, horizon=1.0)
        batch = BrownianBatch.generate(20, grid, 1, seed=1)
        with pytest.raises(SimulationError, match="step 5"):
            simulate_driftless(problem, grid, batch)

    def test_rejects_controlled_vol(self):
        problem = make_vol_problem()
        grid = TimeGrid(num_steps=4, horizon=1.0)
        batch = BrownianBatch.generate(8, grid, 1, seed=0)
        with pytest.raises(ValidationError):
            simulate_driftless(problem, grid, batch)


@pytest.fixture(scope="module")
def ensemble():
    problem = make_lin_problem()
    grid = TimeGrid(num_steps=40, horizon=1.0)
    batch = BrownianBatch.generate(100_000, grid, 1, seed=17)
    return simulate_driftless(problem, grid, batch)


class TestGirsanovLogWeights:

    def test_zero_theta(self, ensemble):
        theta = np.zeros_like(ensemble.brownian.increments)
        assert np.array_equal(girsanov_log_weights(ensemble, theta), np.zeros(100_000))

    def test_constant_theta_closed_form(self, ensemble):
        c = 0.8
        theta = np.full_like(ensemble.brownian.increments, c)
        lw = girsanov_log_weights(ensemble, theta)
        b_t = ensemble.brownian.increments.sum(axis=(1, 2))
        np.testing.assert_allclose(lw, c * b_t - 0.5 * c * c * ensemble.grid.horizon, rtol=1e-12, atol=1e-12)

    def test_exponential_has_unit_mean(self, ensemble):
        theta = np.ones_like(ensemble.brownian.increments)
        w = np.exp(girsanov_log_weights(ensemble, theta))
        se = w.std(ddof=1) / np.sqrt(w.size)
        assert abs(w.mean() - 1.0) < 3 * se

    def test_path_dependent_theta_unit_mean(self, ensemble):
        # Adapted, bounded field: theta_j = sin(X_{t_j}) evaluated left-point.
        theta = np.sin(ensemble.states[:, :-1, :1])[:, :, 0][..., None]
        w = np.exp(girsanov_log_weights(ensemble, theta))
        se = w.std(ddof=1) / np.sqrt(w.size)
        assert abs(w.mean() - 1.0) < 3 * se

    def test_shape_mismatch_rejected(self, ensemble):
        with pytest.raises(ValidationError, match="shape"):
            girsanov_log_weights(ensemble, np.zeros((3, 2, 1)))

    def test_nonfinite_theta_rejected(self, ensemble):
        theta = np.zeros_like(ensemble.brownian.increments)
        theta[0, 0, 0] = np.inf
        with pytest.raises(EvaluationError, match="finite"):
            girsanov_log_weights(ensemble, theta)


class TestSimulateControlledForward:
    def test_zero_coupling_matches_driftless(self):
        controlled = make_vol_problem(kappa=0.0)
        twin = dataclasses.replace(controlled, controlled_vol=False)
        grid = TimeGrid(num_steps=10, horizon=1.0)
        batch = BrownianBatch.generate(200, grid, 1, seed=23)
        a = simulate_controlled_forward(controlled, grid, batch, ConstZ([1.0]))
        b = simulate_driftless(twin, grid, batch)
        assert np.array_equal(a.states, b.states)

    def test_constant_feedback_policy_and_quadratic_variation(self):
        problem = make_vol_problem(kappa=0.5, state_free_coeffs=True)
        grid = TimeGrid(num_steps=12, horizon=1.0)
        batch = BrownianBatch.generate(10_000, grid, 1, seed=29)
        ens = simulate_controlled_forward(problem, grid, batch, ConstZ([1.0]))
        # argmax of (1 + 0.5 u2) u1 - (u1^2 + u2^2)/2 over the grid.
        assert np.array_equal(ens.policy_actions, np.broadcast_to([1.0, 0.5], (10_000, 12, 2)))
        np.testing.assert_allclose(ens.policy_drift, 1.0)
        np.testing.assert_allclose(ens.policy_cost, 0.625)
        sq = np.diff(ens.states[:, :, 0], axis=1) ** 2 / grid.step
        sigma_sq = 1.25**2
        se = sigma_sq * np.sqrt(2.0 / sq.size)
        assert abs(sq.mean() - sigma_sq) < 3 * se
        assert ens.level_fallbacks == 0

    def test_tabulated_coefficients_do_not_change_paths(self):
        generic = make_vol_problem(kappa=0.25)
        tabulated = dataclasses.replace(generic, state_free_coeffs=True)
        grid = TimeGrid(num_steps=6, horizon=1.0)
        batch = BrownianBatch.generate(200, grid, 1, seed=37)
        a = simulate_controlled_forward(generic, grid, batch, ConstZ([0.3]))
        b = simulate_controlled_forward(tabulated, grid, batch, ConstZ([0.3]))
        np.testing.assert_allclose(a.states, b.states, rtol=1e-13, atol=1e-15)
        assert np.array_equal(a.policy_actions, b.policy_actions)

    def test_worker_count_is_invisible(self):
        problem = make_vol_problem(kappa=0.25, state_free_coeffs=True)
        grid = TimeGrid(num_steps=8, horizon=1.0)
        batch = BrownianBatch.generate(600, grid, 1, seed=31)
        solo = simulate_controlled_forward(problem, grid, batch, ConstZ([0.3]), workers=1)
        pooled = simulate_controlled_forward(problem, grid, batch, ConstZ([0.3]), workers=4)
        assert np.array_equal(solo.states, pooled.states)
        assert np.array_equal(solo.policy_actions, pooled.policy_actions)

    def test_rejects_uncontrolled(self):
        problem = make_lin_problem()
        grid = TimeGrid(num_steps=4, horizon=1.0)
        batch = BrownianBatch.generate(8, grid, 1, seed=0)
        with pytest.raises(ValidationError):
            simulate_controlled_forward(problem, grid, batch, ConstZ([0.0]))


class TestDumpRoundTrip:
    def test_round_trip(self, tmp_path):
        problem = make_lin_problem()
        grid = TimeGrid(num_steps=6, horizon=1.5)
        batch = BrownianBatch.generate(30, grid, 1, seed=41)
        ens = simulate_driftless(problem, grid, batch)
        ens.log_weights[:] = np.linspace(-1.0, 1.0, 30)
        target = str(tmp_path / "paths.bin")
        save_ensemble(ens, target)
        back = load_ensemble(target)
        assert back.grid == grid
        assert back.brownian.seed == 41
        assert np.array_equal(back.brownian.increments, batch.increments)
        assert np.array_equal(back.states, ens.states)
        assert np.array_equal(back.log_weights, ens.log_weights)

    def test_rejects_foreign_file(self, tmp_path):
        target = tmp_path / "junk.bin"
        target.write_bytes(b"\x00" * 64)
        with pytest.raises(ValidationError, match="dump"):
            load_ensemble(str(target))


class TestDeriveSeed:
    def test_deterministic_and_tag_sensitive(self):
        assert derive_seed(7, 1, 2) == derive_seed(7, 1, 2)
        assert derive_seed(7, 1, 2) != derive_seed(7, 2, 1)
        assert derive_seed(7) != derive_seed(8)
