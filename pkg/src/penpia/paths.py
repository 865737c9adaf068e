"""Path engine: forward SDE simulation and change-of-measure weights.

The weak-formulation solvers never simulate a drifted state. The state law is
fixed by the driftless dynamics dX = sigma(t, X) dB, and controls enter as
Girsanov reweightings exp(sum theta.dB - 1/2 sum |theta|^2 dt) computed here
in log space with left-point (Ito) discretization. Only the
controlled-volatility scheme re-simulates, because there the policy changes
the state law itself: dX = sigma(t, X, u*(t, X, z_prev)) dB.

Everything is reproducible from (seed, shape): one PCG64 stream generates the
Brownian increments, and all per-path work runs in fixed chunks so results
are bit-identical for any worker count.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from ._parallel import run_chunked
from .errors import EvaluationError, SimulationError, ValidationError
from .problems import ControlProblem, full_policy_scan

__all__ = [
    "TimeGrid",
    "BrownianBatch",
    "PathEnsemble",
    "simulate_driftless",
    "girsanov_log_weights",
    "simulate_controlled_forward",
    "save_ensemble",
    "load_ensemble",
    "derive_seed",
]


class ZEvaluator(Protocol):
    """Feedback-form adjoint estimate: per-step evaluation along new paths."""

    def evaluate(self, step: int, prefixes: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = horizon."""

    num_steps: int
    horizon: float

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValidationError("time grid needs at least one step")
        if self.horizon <= 0:
            raise ValidationError("time grid horizon must be positive")

    @property
    def step(self) -> float:
        return self.horizon / self.num_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.num_steps + 1)


@dataclass(frozen=True)
class BrownianBatch:
    """Brownian increments [paths x steps x noise_dim], N(0, step I) each."""

    num_paths: int
    increments: np.ndarray
    seed: int

    @classmethod
    def generate(cls, num_paths: int, grid: TimeGrid, noise_dim: int, seed: int) -> "BrownianBatch":
        if num_paths < 1:
            raise ValidationError("need at least one path")
        rng = np.random.default_rng(seed)
        inc = rng.standard_normal((num_paths, grid.num_steps, noise_dim)) * np.sqrt(grid.step)
        return cls(num_paths=num_paths, increments=inc, seed=seed)


def derive_seed(seed: int, *tags: int) -> int:
    """Deterministic independent stream seed for auxiliary simulations."""
    state = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *[t & 0xFFFFFFFF for t in tags]])
    return int(state.generate_state(1, np.uint64)[0])


@dataclass
class PathEnsemble:
    """Simulated batch: states [P x (N+1) x m] plus per-path log densities.

    The optional policy fields cache the coefficients at the policy chosen
    while simulating (controlled-volatility mode), saving the backward pass a
    second exhaustive scan; they are advisory and never serialized.
    """

    grid: TimeGrid
    brownian: BrownianBatch
    states: np.ndarray
    log_weights: np.ndarray
    policy_drift: np.ndarray | None = None
    policy_cost: np.ndarray | None = None
    policy_actions: np.ndarray | None = None
    level_fallbacks: int = 0

    @property
    def num_paths(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]


def _any_action(problem: ControlProblem, count: int) -> np.ndarray:
    # Uncontrolled volatility ignores the action argument; pass the first
    # grid point so every call site stays on the batched signature.
    return np.broadcast_to(problem.action_set.points[0], (count, problem.action_dim))


def simulate_driftless(
    problem: ControlProblem,
    grid: TimeGrid,
    brownian: BrownianBatch,
    workers: int = 1,
) -> PathEnsemble:
    """Euler scheme for dX = sigma(t, X) dB from the problem's initial point.

    Log-weights start at zero (unit density); drift and running cost are
    never read, which is what lets one ensemble serve every iteration.
    """
    if problem.controlled_vol:
        raise ValidationError("simulate_driftless requires an uncontrolled-volatility problem")
    num_paths = brownian.num_paths
    num_steps = grid.num_steps
    states = np.empty((num_paths, num_steps + 1, problem.state_dim))
    states[:, 0, :] = problem.initial_state
    times = grid.times
    inc = brownian.increments

    def work(lo: int, hi: int) -> None:
        block = states[lo:hi]
        actions = _any_action(problem, hi - lo)
        for j in range(num_steps):
            try:
                sig = problem.eval_vol(times[j], block[:, : j + 1], actions)
            except EvaluationError as exc:
                raise SimulationError(f"paths [{lo}, {hi}) at step {j}: {exc}") from exc
            block[:, j + 1] = block[:, j] + np.einsum("pmd,pd->pm", sig, inc[lo:hi, j])

    run_chunked(work, num_paths, workers)
    return PathEnsemble(
        grid=grid,
        brownian=brownian,
        states=states,
        log_weights=np.zeros(num_paths),
    )


def girsanov_log_weights(ensemble: PathEnsemble, theta: np.ndarray) -> np.ndarray:
    """Log density of the stochastic exponential of int theta . dB per path.

    Left-point discretization: sum_j theta_j . dB_j - 1/2 sum_j |theta_j|^2 dt
    with theta_j evaluated along the ensemble's own paths (shape [P, N, d]).
    """
    inc = ensemble.brownian.increments
    theta = np.asarray(theta, dtype=float)
    if theta.shape != inc.shape:
        raise ValidationError(f"theta must have shape {inc.shape}, got {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise EvaluationError("theta contains non-finite values")
    step = ensemble.grid.step
    ito = np.einsum("pnd,pnd->p", theta, inc)
    compensator = 0.5 * step * np.einsum("pnd,pnd->p", theta, theta)
    return ito - compensator


def simulate_controlled_forward(
    problem: ControlProblem,
    grid: TimeGrid,
    brownian: BrownianBatch,
    z_prev: ZEvaluator,
    workers: int = 1,
) -> PathEnsemble:
    """Euler scheme for dX = sigma(t, X, u*(t, X, z_prev)) dB.

    At each step the policy is the global grid argmax of (sigma.b).z - L,
    i.e. the outer maximization over volatility levels composed with the
    level-constrained inner one. Because the scan covers the whole grid, the
    nearest-level fallback can never fire here; the diagnostics counter is
    kept at zero for interface parity with level-constrained callers.

    The coefficients at the chosen policy are cached on the ensemble
    (``policy_drift``, ``policy_cost``, ``policy_actions``) for the backward
    pass.
    """
    if not problem.controlled_vol:
        raise ValidationError("simulate_controlled_forward requires a controlled-volatility problem")
    num_paths = brownian.num_paths
    num_steps = grid.num_steps
    states = np.empty((num_paths, num_steps + 1, problem.state_dim))
    states[:, 0, :] = problem.initial_state
    policy_drift = np.empty((num_paths, num_steps, problem.noise_dim))
    policy_cost = np.empty((num_paths, num_steps))
    policy_actions = np.empty((num_paths, num_steps, problem.action_dim))
    times = grid.times
    inc = brownian.increments
    points = problem.action_set.points

    def work(lo: int, hi: int) -> None:
        block = states[lo:hi]
        for j in range(num_steps):
            prefixes = block[:, : j + 1]
            z = np.asarray(z_prev.evaluate(j, prefixes), dtype=float)
            z = z.reshape(hi - lo, problem.noise_dim)
            try:
                _, idx, sig, b, cost = full_policy_scan(problem, times[j], prefixes, z)
            except EvaluationError as exc:
                raise SimulationError(f"paths [{lo}, {hi}) at step {j}: {exc}") from exc
            policy_drift[lo:hi, j] = b
            policy_cost[lo:hi, j] = cost
            policy_actions[lo:hi, j] = points[idx]
            block[:, j + 1] = block[:, j] + np.einsum("pmd,pd->pm", sig, inc[lo:hi, j])

    run_chunked(work, num_paths, workers)
    return PathEnsemble(
        grid=grid,
        brownian=brownian,
        states=states,
        log_weights=np.zeros(num_paths),
        policy_drift=policy_drift,
        policy_cost=policy_cost,
        policy_actions=policy_actions,
        level_fallbacks=0,
    )


# -- flat binary debugging dump ---------------------------------------------

_MAGIC = b"PENS"
_HEADER = struct.Struct("<4sIQQQQqd")  # magic, version, P, N, m, d, seed, horizon
_DUMP_VERSION = 1


def save_ensemble(ensemble: PathEnsemble, path: str) -> None:
    """Write a self-describing flat binary dump (header + row-major arrays)."""
    perm, steps = ensemble.num_paths, ensemble.grid.num_steps
    m = ensemble.state_dim
    d = ensemble.brownian.increments.shape[2]
    header = _HEADER.pack(
        _MAGIC, _DUMP_VERSION, perm, steps, m, d, ensemble.brownian.seed, ensemble.grid.horizon
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ensemble.brownian.increments).tobytes())
        fh.write(np.ascontiguousarray(ensemble.states).tobytes())
        fh.write(np.ascontiguousarray(ensemble.log_weights).tobytes())


def load_ensemble(path: str) -> PathEnsemble:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        magic, version, perm, steps, m, d, seed, horizon = _HEADER.unpack(raw)
        if magic != _MAGIC or version != _DUMP_VERSION:
            raise ValidationError(f"not a path-ensemble dump: {path}")
        inc = np.frombuffer(fh.read(perm * steps * d * 8), dtype=float).reshape(perm, steps, d)
        states = np.frombuffer(fh.read(perm * (steps + 1) * m * 8), dtype=float).reshape(
            perm, steps + 1, m
        )
        log_weights = np.frombuffer(fh.read(perm * 8), dtype=float)
    grid = TimeGrid(num_steps=steps, horizon=horizon)
    brownian = BrownianBatch(num_paths=perm, increments=inc, seed=seed)
    return PathEnsemble(grid=grid, brownian=brownian, states=states, log_weights=log_weights.copy())
