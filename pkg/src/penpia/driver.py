"""Scheme orchestration: iteration ladders, error metrics, equality checks.

This module wires the solvers into full experiments.  ``run_pia_mc`` runs
the penalized ladder on one driftless ensemble (common random numbers
across all iterates), ``run_pia_vol`` re-simulates the forward law every
iterate because the volatility moves with the policy, and ``run_pia_pde``
(re-exported from the grid engine) is the dense Markovian realization.
``entropic_crosscheck`` re-computes one iterate by simulating the drifted
dynamics of the frozen policy and evaluating the plain (unweighted)
log-exponential mean, which must agree with the reweighted estimator up to
Monte Carlo noise; the equality of the two routes is a structural property
of the scheme, so the check guards both the weighting and the simulation.

Worker count comes from the ``PENPIA_WORKERS`` environment variable rather
than the config: path work is chunked deterministically, so the worker
count cannot change any number and does not belong in the experiment's
identity.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from ._parallel import run_chunked
from .bench import benchmark, benchmark_names
from .errors import (
    InstabilityError,
    InsufficientDataError,
    PositivityError,
    ValidationError,
)
from .lsmc import (
    RegressionBasis,
    ZRepresentation,
    _default_basis,
    compute_policy_fields,
    estimate_Z,
    explicit_iterate_value,
    solve_reference_bsde,
)
from .paths import BrownianBatch, TimeGrid, derive_seed, simulate_controlled_forward, simulate_driftless
from .pde import GridSpec, run_pia_pde, solve_vol_hjb_reference
from .problems import (
    ControlProblem,
    PenaltySchedule,
    check_vol_smallness,
    full_policy_scan,
    policy_scan,
)
from .report import (
    ConvergenceReport,
    CrosscheckResult,
    IterationRecord,
    ReferenceValue,
    fit_rate,
    runtime_versions,
)

__all__ = [
    "SchemeConfig",
    "run_experiment",
    "run_pia_mc",
    "run_pia_vol",
    "run_pia_pde",
    "entropic_crosscheck",
    "fit_rate",
]

logger = logging.getLogger(__name__)

MODES = ("mc_nonmarkovian", "pde_markovian", "mc_controlled_vol")

_DEFAULT_VOL_GRID = GridSpec(-6.0, 6.0, num_nodes=301, num_time_steps=200)
# Stream tag separating the crosscheck's drifted simulation from the ladder.
_CROSSCHECK_STREAM = 7


def workers_from_env() -> int:
    """Worker count from PENPIA_WORKERS (default 1)."""
    raw = os.environ.get("PENPIA_WORKERS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ValidationError(f"PENPIA_WORKERS must be an integer, got {raw!r}") from None
    if workers < 1:
        raise ValidationError(f"PENPIA_WORKERS must be >= 1, got {workers}")
    return workers


@dataclass(frozen=True)
class SchemeConfig:
    """Everything that identifies one ladder experiment.

    ``stop_tol`` ends the ladder early once consecutive values move by less
    than the tolerance (0 disables the stop); stopping early is a normal
    completion, not a partial report.  ``grid`` is required by the grid mode
    and doubles as the reference resolution for the controlled-volatility
    mode.  ``basis`` defaults to the per-problem choice of the backward
    solver.  The worker count is deliberately absent: it cannot change any
    reported number.
    """

    mode: str
    schedule: PenaltySchedule
    n_max: int = 3
    num_paths: int = 100_000
    num_steps: int = 100
    grid: GridSpec | None = None
    basis: RegressionBasis | None = None
    seed: int = 0
    stop_tol: float = 0.0
    record_timings: bool = False

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if int(self.n_max) != self.n_max or self.n_max < 0:
            raise ValidationError(f"n_max must be a non-negative integer, got {self.n_max!r}")
        object.__setattr__(self, "n_max", int(self.n_max))
        if self.num_paths < 1:
            raise ValidationError("num_paths must be at least 1")
        if self.num_steps < 1:
            raise ValidationError("num_steps must be at least 1")
        if int(self.seed) != self.seed:
            raise ValidationError(f"seed must be an integer, got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed))
        if not np.isfinite(self.stop_tol) or self.stop_tol < 0:
            raise ValidationError(f"stop_tol must be a finite nonnegative real, got {self.stop_tol!r}")
        if self.mode == "pde_markovian" and self.grid is None:
            raise ValidationError("pde_markovian mode requires a grid")

    def to_dict(self) -> dict:
        basis = self.basis
        return {
            "mode": self.mode,
            "schedule": self.schedule.to_dict(),
            "n_max": self.n_max,
            "num_paths": self.num_paths,
            "num_steps": self.num_steps,
            "grid": None if self.grid is None else self.grid.to_dict(),
            "basis": (
                None
                if basis is None
                else {"kind": basis.kind, "degree": basis.degree, "ridge": basis.ridge}
            ),
            "seed": self.seed,
            "stop_tol": self.stop_tol,
            "record_timings": self.record_timings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeConfig":
        if not isinstance(d, dict):
            raise ValidationError("scheme config must be an object")
        known = {
            "mode",
            "schedule",
            "n_max",
            "num_paths",
            "num_steps",
            "grid",
            "basis",
            "seed",
            "stop_tol",
            "record_timings",
        }
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown scheme config keys: {sorted(extra)}")
        for required in ("mode", "schedule"):
            if required not in d:
                raise ValidationError(f"scheme config requires '{required}'")
        basis = d.get("basis")
        if basis is not None:
            if not isinstance(basis, dict):
                raise ValidationError("basis must be an object")
            extra = set(basis) - {"kind", "degree", "ridge"}
            if extra:
                raise ValidationError(f"unknown basis keys: {sorted(extra)}")
            basis = RegressionBasis(
                kind=basis.get("kind", "markov-poly"),
                degree=int(basis.get("degree", 3)),
                ridge=float(basis.get("ridge", 1e-8)),
            )
        grid = d.get("grid")
        return cls(
            mode=d["mode"],
            schedule=PenaltySchedule.from_dict(d["schedule"]),
            n_max=int(d.get("n_max", 3)),
            num_paths=int(d.get("num_paths", 100_000)),
            num_steps=int(d.get("num_steps", 100)),
            grid=None if grid is None else GridSpec.from_dict(grid),
            basis=basis,
            seed=int(d.get("seed", 0)),
            stop_tol=float(d.get("stop_tol", 0.0)),
            record_timings=bool(d.get("record_timings", False)),
        )


# -- shared pieces -------------------------------------------------------------


def _envelope_config(problem: ControlProblem, config: SchemeConfig) -> dict:
    return {"problem": problem.name, **config.to_dict()}


def _bench_spec(problem: ControlProblem):
    """The stock benchmark matching this problem's name, if any."""
    if problem.name in benchmark_names() and problem.name != "bm-vol":
        return benchmark(problem.name)
    return None


def _materialize_z(
    z_rep: ZRepresentation, states: np.ndarray, num_steps: int, workers: int
) -> np.ndarray:
    """Evaluate the adjoint field along the paths: [paths x steps x d]."""
    num_paths = states.shape[0]
    out = np.empty((num_paths, num_steps, z_rep.noise_dim))

    def work(lo: int, hi: int) -> None:
        for j in range(num_steps):
            out[lo:hi, j] = z_rep.evaluate(j, states[lo:hi, : j + 1])

    run_chunked(work, num_paths, workers)
    return out


def _field_square_distance(a: np.ndarray, b: np.ndarray, step: float) -> float:
    """Path-averaged integral of the squared field gap (left-point rule)."""
    return float(np.mean(np.sum((a - b) ** 2, axis=(1, 2))) * step)


def _accumulated_cost(policy_cost: np.ndarray, step: float, basis: RegressionBasis):
    """Cost accumulated before each step, or None for state-only bases."""
    if basis.kind != "path-poly":
        return None
    acc = np.zeros_like(policy_cost)
    np.cumsum(policy_cost[:, :-1] * step, axis=1, out=acc[:, 1:])
    return acc


def _control_gap(
    actions: np.ndarray, times: np.ndarray, states: np.ndarray, step: float, analytic_control
) -> tuple[float, float]:
    """Mean and standard error of the per-path squared distance to the
    known optimal control, integrated over time."""
    num_paths, num_steps, _ = actions.shape
    per_path = np.zeros(num_paths)
    for j in range(num_steps):
        target = analytic_control(times[j], states[:, j, :])
        per_path += np.sum((actions[:, j, :] - target) ** 2, axis=1) * step
    gap = float(per_path.mean())
    stderr = float(per_path.std() / np.sqrt(num_paths))
    return gap, stderr


def _fitted_rate(records: list[IterationRecord]) -> float | None:
    errors = [record.err for record in records if record.err is not None]
    if len(errors) < 3:
        return None
    floor = 1.5 * min(abs(e) for e in errors)
    try:
        slope, _ = fit_rate(errors, floor=floor)
    except InsufficientDataError:
        return None
    return slope


def _should_stop(config: SchemeConfig, records: list[IterationRecord]) -> bool:
    if config.stop_tol <= 0 or len(records) < 2:
        return False
    if abs(records[-1].value - records[-2].value) < config.stop_tol:
        logger.info(
            "ladder stopped early at n=%d: |V^n - V^(n-1)| < %g",
            records[-1].n,
            config.stop_tol,
        )
        return True
    return False


# -- uncontrolled-volatility ladder ---------------------------------------------


def _mc_reference(problem, ensemble, basis, workers) -> ReferenceValue:
    spec = _bench_spec(problem)
    if spec is not None and spec.analytic_value is not None:
        value = spec.analytic_value(float(problem.initial_state[0]), problem.horizon)
        return ReferenceValue(value, "analytic")
    solution = solve_reference_bsde(problem, ensemble, basis)
    return ReferenceValue(solution.value, "bsde-oracle", tolerance=solution.stderr)


def run_pia_mc(problem: ControlProblem, config: SchemeConfig) -> ConvergenceReport:
    """Penalized ladder on one driftless ensemble (common random numbers).

    Measure changes are carried entirely by the Girsanov weights of the
    frozen policy, so every iterate reuses the same simulated paths; the
    reference is the closed form when the benchmark has one and the
    backward-regression solve on the same ensemble otherwise.
    """
    if config.mode != "mc_nonmarkovian":
        raise ValidationError(f"run_pia_mc expects mode 'mc_nonmarkovian', got {config.mode!r}")
    if problem.controlled_vol:
        raise ValidationError("run_pia_mc requires uncontrolled volatility")
    workers = workers_from_env()
    basis = config.basis if config.basis is not None else _default_basis(problem)
    times = TimeGrid(num_steps=config.num_steps, horizon=problem.horizon)
    batch = BrownianBatch.generate(config.num_paths, times, problem.noise_dim, config.seed)
    ensemble = simulate_driftless(problem, times, batch, workers=workers)
    reference = _mc_reference(problem, ensemble, basis, workers)
    spec = _bench_spec(problem)
    analytic_control = None if spec is None else spec.analytic_control

    num_steps = times.num_steps
    step = times.step
    z_prev = ZRepresentation.zero(basis, problem.z_clip, problem.noise_dim, num_steps)
    z_prev_values = np.zeros((config.num_paths, num_steps, problem.noise_dim))
    policy = compute_policy_fields(problem, ensemble, z_prev, workers)

    records: list[IterationRecord] = []
    gaps: list[tuple[float, float]] = []
    partial = False
    for n in range(config.n_max + 1):
        phi_n = float(config.schedule(n))
        start = time.perf_counter()
        try:
            solution = explicit_iterate_value(
                problem, ensemble, z_prev, phi_n, basis=basis, policy=policy, workers=workers
            )
            z_next = estimate_Z(
                ensemble,
                solution.y,
                basis,
                problem.z_clip,
                running_cost=_accumulated_cost(policy.cost, step, basis),
            )
        except (InstabilityError, PositivityError) as exc:
            logger.warning("ladder aborted at n=%d: %s", n, exc)
            partial = True
            break
        z_next_values = _materialize_z(z_next, ensemble.states, num_steps, workers)
        policy_next = compute_policy_fields(problem, ensemble, z_next, workers)
        wall_ms = (time.perf_counter() - start) * 1e3 if config.record_timings else 0.0
        if analytic_control is not None:
            gaps.append(
                _control_gap(policy_next.actions, times.times, ensemble.states, step, analytic_control)
            )
        records.append(
            IterationRecord(
                n=n,
                phi_n=phi_n,
                value=solution.value,
                stderr=solution.stderr,
                err=None if reference.value is None else solution.value - reference.value,
                z_distance=_field_square_distance(z_next_values, z_prev_values, step),
                control_distance=_field_square_distance(policy_next.actions, policy.actions, step),
                wall_ms=wall_ms,
            )
        )
        if _should_stop(config, records):
            break
        z_prev, z_prev_values, policy = z_next, z_next_values, policy_next

    return ConvergenceReport(
        config=_envelope_config(problem, config),
        records=tuple(records),
        reference=reference,
        fitted_rate=_fitted_rate(records),
        control_gaps=tuple(gaps) if analytic_control is not None and gaps else None,
        seed=config.seed,
        versions=runtime_versions(),
        partial=partial,
    )


# -- controlled-volatility ladder -------------------------------------------------


def _vol_policy_actions(
    problem: ControlProblem, ensemble, z_rep: ZRepresentation, workers: int
) -> np.ndarray:
    """Actions of the full volatility-and-drift scan at a given adjoint field.

    The ensemble's own cached policy belongs to the field it was simulated
    under, so evaluating a *different* field needs this explicit scan.
    """
    num_paths = ensemble.num_paths
    num_steps = ensemble.grid.num_steps
    times = ensemble.grid.times
    points = problem.action_set.points
    actions = np.empty((num_paths, num_steps, problem.action_dim))

    def work(lo: int, hi: int) -> None:
        for j in range(num_steps):
            prefixes = ensemble.states[lo:hi, : j + 1]
            z = z_rep.evaluate(j, prefixes)
            _, idx, _, _, _ = full_policy_scan(problem, times[j], prefixes, z)
            actions[lo:hi, j] = points[idx]

    run_chunked(work, num_paths, workers)
    return actions


def _vol_reference(problem: ControlProblem, config: SchemeConfig) -> ReferenceValue:
    if problem.markovian and problem.state_dim == 1 and problem.noise_dim == 1:
        grid = config.grid if config.grid is not None else _DEFAULT_VOL_GRID
        field, _ = solve_vol_hjb_reference(problem, grid)
        return ReferenceValue(field.at_initial(float(problem.initial_state[0])), "pde-oracle")
    logger.info("no grid reference for '%s': not a scalar Markovian problem", problem.name)
    return ReferenceValue(None, "none")


def run_pia_vol(
    problem: ControlProblem,
    config: SchemeConfig,
    smallness_constants: tuple[float, float, float, float] | None = None,
) -> ConvergenceReport:
    """Penalized ladder with policy-dependent volatility.

    The forward law changes with the policy, so each iterate re-simulates
    the ensemble from the same Brownian batch (identical seed, fresh
    states).  The contraction smallness condition is advisory: when the
    caller knows the Lipschitz constants they are checked and logged, never
    enforced.
    """
    if config.mode != "mc_controlled_vol":
        raise ValidationError(
            f"run_pia_vol expects mode 'mc_controlled_vol', got {config.mode!r}"
        )
    if not problem.controlled_vol:
        raise ValidationError("run_pia_vol requires a controlled-volatility problem")
    workers = workers_from_env()
    basis = config.basis if config.basis is not None else _default_basis(problem)
    if smallness_constants is not None:
        holds = check_vol_smallness(problem, *smallness_constants)
        logger.info(
            "volatility smallness condition %s for '%s'",
            "holds" if holds else "FAILS (iterates may not contract)",
            problem.name,
        )
    else:
        logger.info("smallness constants not provided; contraction advisory skipped")
    reference = _vol_reference(problem, config)

    times = TimeGrid(num_steps=config.num_steps, horizon=problem.horizon)
    batch = BrownianBatch.generate(config.num_paths, times, problem.noise_dim, config.seed)
    num_steps = times.num_steps
    step = times.step
    z_prev = ZRepresentation.zero(basis, problem.z_clip, problem.noise_dim, num_steps)

    records: list[IterationRecord] = []
    partial = False
    for n in range(config.n_max + 1):
        phi_n = float(config.schedule(n))
        start = time.perf_counter()
        try:
            ensemble = simulate_controlled_forward(problem, times, batch, z_prev, workers=workers)
            policy = compute_policy_fields(problem, ensemble, z_prev, workers)
            solution = explicit_iterate_value(
                problem, ensemble, z_prev, phi_n, basis=basis, policy=policy, workers=workers
            )
            z_next = estimate_Z(
                ensemble,
                solution.y,
                basis,
                problem.z_clip,
                running_cost=_accumulated_cost(policy.cost, step, basis),
            )
        except (InstabilityError, PositivityError) as exc:
            logger.warning("ladder aborted at n=%d: %s", n, exc)
            partial = True
            break
        # Both fields are compared along the current iterate's paths.
        z_prev_values = _materialize_z(z_prev, ensemble.states, num_steps, workers)
        z_next_values = _materialize_z(z_next, ensemble.states, num_steps, workers)
        actions_next = _vol_policy_actions(problem, ensemble, z_next, workers)
        wall_ms = (time.perf_counter() - start) * 1e3 if config.record_timings else 0.0
        records.append(
            IterationRecord(
                n=n,
                phi_n=phi_n,
                value=solution.value,
                stderr=solution.stderr,
                err=None if reference.value is None else solution.value - reference.value,
                z_distance=_field_square_distance(z_next_values, z_prev_values, step),
                control_distance=_field_square_distance(actions_next, policy.actions, step),
                wall_ms=wall_ms,
            )
        )
        if _should_stop(config, records):
            break
        z_prev = z_next

    return ConvergenceReport(
        config=_envelope_config(problem, config),
        records=tuple(records),
        reference=reference,
        fitted_rate=_fitted_rate(records),
        seed=config.seed,
        versions=runtime_versions(),
        partial=partial,
    )


# -- entropic equality check -------------------------------------------------------


def _simulate_frozen_policy(
    problem: ControlProblem,
    times: TimeGrid,
    batch: BrownianBatch,
    z_prev: ZRepresentation,
    workers: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Drifted dynamics of the frozen policy: dX = b(u*) dt + sigma dB.

    Returns the simulated states and the running cost along the chosen
    actions.  This is the physical law of the policy, so the paths carry
    its value without any reweighting.
    """
    num_paths = batch.num_paths
    num_steps = times.num_steps
    states = np.empty((num_paths, num_steps + 1, problem.state_dim))
    states[:, 0, :] = problem.initial_state
    cost = np.empty((num_paths, num_steps))
    grid_times = times.times
    step = times.step
    inc = batch.increments
    points = problem.action_set.points

    def work(lo: int, hi: int) -> None:
        block = states[lo:hi]
        for j in range(num_steps):
            prefixes = block[:, : j + 1]
            z = z_prev.evaluate(j, prefixes)
            _, idx, _, ell = policy_scan(problem, grid_times[j], prefixes, z)
            actions = points[idx]
            drift = problem.eval_drift(grid_times[j], prefixes, actions)
            sigma = problem.eval_vol(grid_times[j], prefixes, actions)
            block[:, j + 1] = (
                block[:, j]
                + drift * step
                + np.einsum("pmd,pd->pm", sigma, inc[lo:hi, j])
            )
            cost[lo:hi, j] = ell

    run_chunked(work, num_paths, workers)
    return states, cost


def _unweighted_value(functional: np.ndarray, phi_n: float) -> tuple[float, float]:
    """phi * log mean exp(F / phi) with a delta-method standard error."""
    delta = np.expm1(functional / phi_n)
    total = float(delta.mean())
    value = phi_n * np.log1p(total)
    stderr = phi_n / (1.0 + total) * float(delta.std() / np.sqrt(delta.size))
    return value, stderr


def entropic_crosscheck(
    problem: ControlProblem, config: SchemeConfig, n: int
) -> CrosscheckResult:
    """Re-derive the n-th iterate from the policy's own dynamics.

    The ladder's estimator reweights driftless paths; the same value is, by
    construction, the plain log-exponential mean over paths simulated with
    the frozen drift.  This runs both routes on independent random streams
    and reports the gap against their combined standard error (passing
    means within three of them).
    """
    if config.mode != "mc_nonmarkovian":
        raise ValidationError(
            f"entropic_crosscheck expects mode 'mc_nonmarkovian', got {config.mode!r}"
        )
    if not problem.markovian:
        raise ValidationError("entropic_crosscheck requires a Markovian problem")
    if problem.controlled_vol:
        raise ValidationError("entropic_crosscheck requires uncontrolled volatility")
    if int(n) != n or n < 0:
        raise ValidationError(f"iteration index must be a non-negative integer, got {n!r}")
    n = int(n)
    workers = workers_from_env()
    basis = config.basis if config.basis is not None else _default_basis(problem)
    times = TimeGrid(num_steps=config.num_steps, horizon=problem.horizon)
    batch = BrownianBatch.generate(config.num_paths, times, problem.noise_dim, config.seed)
    ensemble = simulate_driftless(problem, times, batch, workers=workers)
    step = times.step

    # Ladder route: identical to run_pia_mc up to iterate n.
    z_prev = ZRepresentation.zero(basis, problem.z_clip, problem.noise_dim, times.num_steps)
    policy = compute_policy_fields(problem, ensemble, z_prev, workers)
    solution = None
    for k in range(n + 1):
        phi_k = float(config.schedule(k))
        solution = explicit_iterate_value(
            problem, ensemble, z_prev, phi_k, basis=basis, policy=policy, workers=workers
        )
        if k == n:
            break
        z_prev = estimate_Z(
            ensemble,
            solution.y,
            basis,
            problem.z_clip,
            running_cost=_accumulated_cost(policy.cost, step, basis),
        )
        policy = compute_policy_fields(problem, ensemble, z_prev, workers)

    # Drifted route: fresh stream, frozen policy, no reweighting.
    phi_n = float(config.schedule(n))
    drift_seed = derive_seed(config.seed, _CROSSCHECK_STREAM, n)
    drift_batch = BrownianBatch.generate(config.num_paths, times, problem.noise_dim, drift_seed)
    states, cost = _simulate_frozen_policy(problem, times, drift_batch, z_prev, workers)
    functional = problem.eval_terminal(states) - cost.sum(axis=1) * step
    v_tilde, v_tilde_stderr = _unweighted_value(functional, phi_n)

    gap = abs(v_tilde - solution.value)
    combined = float(np.hypot(v_tilde_stderr, solution.stderr))
    return CrosscheckResult(
        n=n,
        v_tilde=v_tilde,
        v_tilde_stderr=v_tilde_stderr,
        v_n=solution.value,
        v_n_stderr=solution.stderr,
        gap=gap,
        combined_stderr=combined,
        passed=bool(gap <= 3.0 * combined),
    )


# -- dispatch ------------------------------------------------------------------------


def run_experiment(
    problem: ControlProblem,
    config: SchemeConfig,
    smallness_constants: tuple[float, float, float, float] | None = None,
) -> ConvergenceReport:
    """Run the ladder in whatever mode the config selects.

    ``smallness_constants`` only matters in the controlled-volatility mode,
    where it feeds the advisory contraction check.
    """
    if config.mode == "pde_markovian":
        return run_pia_pde(
            problem,
            config.grid,
            config.schedule,
            config.n_max,
            config=_envelope_config(problem, config),
            record_timings=config.record_timings,
        )
    if config.mode == "mc_nonmarkovian":
        return run_pia_mc(problem, config)
    return run_pia_vol(problem, config, smallness_constants=smallness_constants)
