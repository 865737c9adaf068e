"""Benchmark-registry tests: closed forms, oracle values, stability guards."""

import dataclasses

import numpy as np
import pytest

from penpia.bench import (
    BenchmarkSpec,
    OracleRecipe,
    benchmark,
    benchmark_names,
    lin_iterates,
    lin_value,
    oracle_value,
)
from penpia.errors import OracleUnstableError, RegistryError, ValidationError
from penpia.pde import GridSpec
from penpia.problems import check_vol_smallness, make_problem, registered_problems


class TestRegistry:
    def test_stock_names(self):
        assert benchmark_names() == ["bm-cos", "bm-lin", "bm-vol"]

    def test_unknown_name_lists_the_registry(self):
        with pytest.raises(RegistryError, match="bm-lin"):
            benchmark("bm-quadratic")

    def test_problems_are_also_registered_globally(self):
        assert set(benchmark_names()) <= set(registered_problems())
        assert make_problem("bm-cos").name == "bm-cos"
        assert make_problem("bm-vol", kappa=0.5).vol_bound == 1.5

    def test_parameter_validation(self):
        with pytest.raises(ValidationError, match="parameters"):
            benchmark("bm-lin", kappa=0.1)
        with pytest.raises(ValidationError, match="kappa"):
            benchmark("bm-vol", kappa=0.7)
        with pytest.raises(ValidationError, match="kappa"):
            benchmark("bm-vol", kappa=-0.1)


class TestLinClosedForms:
    def test_value(self):
        assert lin_value(0.0, 1.0) == 0.5
        assert lin_value(0.3, 2.0) == 1.3
        assert benchmark("bm-lin").analytic_value(0.0, 1.0) == 0.5

    def test_iterate_ladder(self):
        spec = benchmark("bm-lin")
        assert spec.analytic_iterates(0, 1.0) == 0.5
        assert spec.analytic_iterates(1, 4.0) == 0.625
        assert spec.analytic_iterates(2, 16.0) == 0.53125

    def test_ladder_contracts_at_the_penalty_rate(self):
        # The gap to the optimal value is exactly T / (2 phi_n) for n >= 1.
        for n in range(1, 8):
            phi = 4.0**n
            assert lin_iterates(n, phi) - lin_value(0.0, 1.0) == 0.5 / phi

    def test_iterates_validation(self):
        with pytest.raises(ValidationError, match="non-negative"):
            lin_iterates(-1, 1.0)
        with pytest.raises(ValidationError, match="phi_n"):
            lin_iterates(0, 0.5)

    def test_control_is_the_unit_action(self):
        control = benchmark("bm-lin").analytic_control
        actions = control(0.3, np.zeros((5, 1)))
        assert actions.shape == (5, 1)
        assert np.all(actions == 1.0)


class TestProblemCoefficients:
    def test_bounds_hold_on_sample_batches(self):
        # Every stock problem evaluates its coefficients within the bounds
        # it declares (the evaluators enforce them).
        for name in benchmark_names():
            problem = benchmark(name).problem
            prefixes = np.zeros((4, 1, problem.state_dim))
            actions = np.tile(problem.action_set.points[-1], (4, 1))
            assert np.all(np.isfinite(problem.eval_drift(0.0, prefixes, actions)))
            assert np.all(np.isfinite(problem.eval_vol(0.0, prefixes, actions)))
            assert np.all(np.isfinite(problem.eval_cost(0.0, prefixes, actions)))

    def test_flags(self):
        assert not benchmark("bm-lin").problem.controlled_vol
        assert not benchmark("bm-cos").problem.controlled_vol
        assert benchmark("bm-vol").problem.controlled_vol
        assert all(benchmark(name).problem.state_free_coeffs for name in benchmark_names())

    def test_vol_coupling_scales_with_kappa(self):
        problem = benchmark("bm-vol", kappa=0.5).problem
        prefixes = np.zeros((1, 1, 1))
        top = problem.eval_vol(0.0, prefixes, np.array([[0.0, 1.0]]))
        bottom = problem.eval_vol(0.0, prefixes, np.array([[0.0, -1.0]]))
        assert top[0, 0, 0] == 1.5
        assert bottom[0, 0, 0] == 0.5


class TestSpecValidation:
    def test_needs_some_reference(self):
        with pytest.raises(ValidationError, match="analytic value or an oracle"):
            BenchmarkSpec(problem=benchmark("bm-lin").problem)

    def test_recipe_validation(self):
        grid = GridSpec(-6.0, 6.0, 11, 2)
        with pytest.raises(ValidationError, match="oracle kind"):
            OracleRecipe("spectral", grid)
        with pytest.raises(ValidationError, match="nonnegative"):
            OracleRecipe("hjb", grid, crosscheck_paths=-1)
        with pytest.raises(ValidationError, match="both paths and steps"):
            OracleRecipe("hjb", grid, crosscheck_paths=100)


class TestOracleValue:
    def test_lin_oracle_recovers_the_closed_form(self):
        value, tolerance = oracle_value(benchmark("bm-lin"))
        assert abs(value - 0.5) < 1e-6
        assert tolerance <= 1e-2

    def test_vol_oracle_at_zero_coupling_matches_lin(self):
        value, tolerance = oracle_value(benchmark("bm-vol", kappa=0.0))
        assert abs(value - 0.5) < 1e-6
        assert tolerance <= 1e-2

    def test_cos_oracle_agrees_across_solvers(self):
        value, tolerance = oracle_value(benchmark("bm-cos"))
        assert tolerance <= 2e-2
        assert abs(value - 0.6864) < 1e-2

    def test_degenerate_recipe_fails_the_refinement_check(self):
        coarse = OracleRecipe("hjb", GridSpec(-6.0, 6.0, 401, 1))
        spec = dataclasses.replace(benchmark("bm-cos"), oracle_recipe=coarse)
        with pytest.raises(OracleUnstableError, match="refinement"):
            oracle_value(spec, requested_tol=1e-4)

    def test_tight_request_fails_the_cross_solver_check(self):
        spec = benchmark("bm-cos")
        grid = GridSpec(-6.0, 6.0, 401, 50)
        with pytest.raises(OracleUnstableError, match="disagreement"):
            oracle_value(spec, grid=grid, requested_tol=1e-4)

    def test_validation(self):
        bare = dataclasses.replace(benchmark("bm-lin"), oracle_recipe=None)
        with pytest.raises(ValidationError, match="no oracle recipe"):
            oracle_value(bare)
        with pytest.raises(ValidationError, match="positive"):
            oracle_value(benchmark("bm-lin"), requested_tol=0.0)


class TestSmallnessConstants:
    def test_separated_coefficients_pass_for_every_kappa(self):
        for kappa in (0.0, 0.25, 0.5):
            spec = benchmark("bm-vol", kappa=kappa)
            assert spec.smallness_constants is not None
            assert check_vol_smallness(spec.problem, *spec.smallness_constants)

    def test_uncoupled_benchmarks_carry_no_constants(self):
        assert benchmark("bm-lin").smallness_constants is None
        assert benchmark("bm-cos").smallness_constants is None
