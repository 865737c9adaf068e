"""Control-problem definitions: coefficients, Hamiltonians, penalty schedules.

This module is pure evaluation -- no simulation, no grids. A control problem
is the tuple (T, m, d, k, x0, U, b, sigma, L, G) of horizon, state/noise/action
dimensions, initial point, compact action set, drift, volatility, running cost
and terminal reward. Two Hamiltonians are evaluated on a finite action grid:

    reduced   h(t, x, z, u) = b(t, x, u) . z - L(t, x, u)
    optimized H(t, x, z)    = max over the grid of h

and, when the volatility itself is controlled, the level-constrained form

    H(t, x, z, S) = max { sigma.b . z - L : sigma.sigma^T(t, x, u) = S }

with the level match relaxed to a tolerance because a finite grid never hits
a prescribed matrix exactly.

Coefficient callables are vectorized over a batch of paths:

    drift(t, prefix, u)           prefix [P, j+1, m], u [P, k] -> [P, d]
    vol(t, prefix, u)             -> [P, m, d]
    running_cost(t, prefix, u)    -> [P]
    terminal_reward(paths)        paths [P, N+1, m] -> [P]

Markovian coefficients simply read ``prefix[:, -1, :]``. Every result must be
per-path elementwise (row p of the output depends on row p of the inputs
only); the engines rely on this for deterministic chunked execution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    EmptyLevelSetError,
    EvaluationError,
    RegistryError,
    ValidationError,
)

__all__ = [
    "ActionGrid",
    "ControlProblem",
    "PenaltySchedule",
    "eval_h",
    "eval_H_argmax",
    "eval_full_H_argmax",
    "check_vol_smallness",
    "policy_scan",
    "full_policy_scan",
    "register_problem",
    "make_problem",
    "registered_problems",
]

#: Absolute tolerance for matching an action vector against the grid.
ACTION_MATCH_ATOL = 1e-12


def _as_points(points: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValidationError("action grid needs at least one point of fixed dimension")
    return arr


@dataclass(frozen=True)
class ActionGrid:
    """Finite discretization of the compact action set U.

    Points are stored lexicographically sorted so that a first-strict-max
    scan breaks argmax ties toward the lexicographically smallest action,
    which makes every selector in the package deterministic.
    """

    points: np.ndarray
    resolution: float

    def __post_init__(self) -> None:
        pts = _as_points(self.points)
        order = np.lexsort(pts.T[::-1])
        pts = np.ascontiguousarray(pts[order])
        if self.resolution <= 0:
            raise ValidationError("action grid resolution must be positive")
        # pairwise-distinct check is cheap on sorted rows: equal rows are adjacent
        if pts.shape[0] > 1 and np.any(np.all(np.abs(np.diff(pts, axis=0)) <= 0.0, axis=1)):
            raise ValidationError("action grid points must be pairwise distinct")
        object.__setattr__(self, "points", pts)
        self.points.setflags(write=False)

    @classmethod
    def uniform(cls, lows: Sequence[float], highs: Sequence[float], resolution: float) -> "ActionGrid":
        """Product grid over a box with per-axis spacing at most ``resolution``."""
        lows_a = np.atleast_1d(np.asarray(lows, dtype=float))
        highs_a = np.atleast_1d(np.asarray(highs, dtype=float))
        if lows_a.shape != highs_a.shape or np.any(highs_a < lows_a):
            raise ValidationError("action box must satisfy low <= high per axis")
        axes = []
        for lo, hi in zip(lows_a, highs_a):
            if hi == lo:
                axes.append(np.array([lo]))
            else:
                n = int(math.ceil((hi - lo) / resolution)) + 1
                axes.append(np.linspace(lo, hi, n))
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        return cls(points=pts, resolution=resolution)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def action_dim(self) -> int:
        return self.points.shape[1]

    def index_of(self, u: Sequence[float] | np.ndarray) -> int:
        """Index of ``u`` on the grid, or -1 when no point matches."""
        ua = np.atleast_1d(np.asarray(u, dtype=float))
        if ua.shape != (self.action_dim,):
            return -1
        hits = np.all(np.abs(self.points - ua[None, :]) <= ACTION_MATCH_ATOL, axis=1)
        idx = np.flatnonzero(hits)
        return int(idx[0]) if idx.size else -1


@dataclass(frozen=True)
class PenaltySchedule:
    """Iteration-indexed penalty weight phi with phi(0) = 1, non-decreasing.

    Kinds:
      exponential          phi(n) = base**n
      super_exponential    phi(n) = base**(n(n+1)/2)
      custom               phi(n) = values[n]
    """

    kind: str
    base: float = 4.0
    values: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind in ("exponential", "super_exponential"):
            if self.base <= 1.0:
                raise ValidationError(f"{self.kind} schedule requires base > 1")
        elif self.kind == "custom":
            if not self.values:
                raise ValidationError("custom schedule requires a non-empty table")
            if self.values[0] != 1.0:
                raise ValidationError("schedule violates the phi(0)=1 invariant")
            if any(b < a for a, b in zip(self.values, self.values[1:])):
                raise ValidationError("custom schedule must be non-decreasing")
        else:
            raise ValidationError(f"unknown schedule kind '{self.kind}'")

    @classmethod
    def exponential(cls, base: float = 4.0) -> "PenaltySchedule":
        return cls(kind="exponential", base=base)

    @classmethod
    def super_exponential(cls, base: float = 2.0) -> "PenaltySchedule":
        return cls(kind="super_exponential", base=base)

    @classmethod
    def custom(cls, values: Sequence[float]) -> "PenaltySchedule":
        return cls(kind="custom", values=tuple(float(v) for v in values))

    def __call__(self, n: int) -> float:
        if n < 0:
            raise ValidationError("schedule index must be nonnegative")
        if self.kind == "exponential":
            return float(self.base) ** n
        if self.kind == "super_exponential":
            return float(self.base) ** (n * (n + 1) // 2)
        if n >= len(self.values):
            raise ValidationError(
                f"custom schedule table covers n < {len(self.values)}, got n={n}"
            )
        return self.values[n]

    @property
    def label(self) -> str:
        if self.kind == "custom":
            return "custom"
        return f"{self.kind}({self.base:g})"

    def to_dict(self) -> dict:
        if self.kind == "custom":
            return {"kind": self.kind, "values": list(self.values)}
        return {"kind": self.kind, "base": self.base}

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltySchedule":
        if not isinstance(d, dict) or "kind" not in d:
            raise ValidationError("schedule must be an object with a 'kind' field")
        extra = set(d) - {"kind", "base", "values"}
        if extra:
            raise ValidationError(f"unknown schedule keys: {sorted(extra)}")
        kind = d["kind"]
        if kind == "custom":
            return cls.custom(d.get("values", ()))
        return cls(kind=kind, base=float(d.get("base", 4.0 if kind == "exponential" else 2.0)))


@dataclass(frozen=True)
class ControlProblem:
    """Problem datum for a finite-horizon stochastic control problem.

    The value under study is the supremum over admissible controls of
    ``E[G(X) - int_0^T L(s, X, u_s) ds]`` for a state X driven by drift
    ``sigma.b`` and volatility ``sigma``; the solvers in this package only
    ever query the coefficients through the batched callables documented in
    the module docstring.
    """

    name: str
    horizon: float
    state_dim: int
    noise_dim: int
    action_dim: int
    initial_state: np.ndarray
    action_set: ActionGrid
    drift: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    vol: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    running_cost: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    terminal_reward: Callable[[np.ndarray], np.ndarray]
    drift_bound: float
    vol_bound: float
    z_clip: float
    markovian: bool = True
    controlled_vol: bool = False
    # Declares that drift, vol, and running_cost depend on (t, u) only, never
    # on the path prefix. The exhaustive action scans then tabulate the
    # coefficients once per step instead of re-evaluating them per path,
    # turning the grid argmax into a single matrix product.
    state_free_coeffs: bool = False

    def __post_init__(self) -> None:
        if self.horizon <= 0:
            raise ValidationError("horizon must be positive")
        for dim_name in ("state_dim", "noise_dim", "action_dim"):
            if getattr(self, dim_name) < 1:
                raise ValidationError(f"{dim_name} must be a positive integer")
        x0 = np.atleast_1d(np.asarray(self.initial_state, dtype=float))
        if x0.shape != (self.state_dim,):
            raise ValidationError("initial_state must be a vector of length state_dim")
        object.__setattr__(self, "initial_state", x0)
        self.initial_state.setflags(write=False)
        if self.action_set.action_dim != self.action_dim:
            raise ValidationError("action grid dimension does not match action_dim")
        if self.drift_bound <= 0 or self.vol_bound <= 0 or self.z_clip <= 0:
            raise ValidationError("drift_bound, vol_bound and z_clip must be positive")
        if self.controlled_vol and self.state_dim != self.noise_dim:
            raise ValidationError("controlled-volatility problems require state_dim == noise_dim")

    # -- checked coefficient evaluation ------------------------------------

    def eval_drift(self, t: float, prefixes: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = np.asarray(self.drift(t, prefixes, u), dtype=float)
        out = out.reshape(prefixes.shape[0], self.noise_dim)
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"drift returned a non-finite value at t={t}")
        norms = np.sqrt(np.sum(out * out, axis=1))
        if np.any(norms > self.drift_bound + 1e-9):
            raise EvaluationError(
                f"drift exceeded its declared bound {self.drift_bound} at t={t}"
            )
        return out

    def eval_vol(self, t: float, prefixes: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = np.asarray(self.vol(t, prefixes, u), dtype=float)
        out = out.reshape(prefixes.shape[0], self.state_dim, self.noise_dim)
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"vol returned a non-finite value at t={t}")
        norms = np.sqrt(np.sum(out * out, axis=(1, 2)))
        if np.any(norms > self.vol_bound + 1e-9):
            raise EvaluationError(f"vol exceeded its declared bound {self.vol_bound} at t={t}")
        return out

    def eval_cost(self, t: float, prefixes: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = np.asarray(self.running_cost(t, prefixes, u), dtype=float)
        out = out.reshape(prefixes.shape[0])
        if not np.all(np.isfinite(out)):
            raise EvaluationError(f"running_cost returned a non-finite value at t={t}")
        return out

    def eval_terminal(self, paths: np.ndarray) -> np.ndarray:
        out = np.asarray(self.terminal_reward(paths), dtype=float)
        out = out.reshape(paths.shape[0])
        if not np.all(np.isfinite(out)):
            raise EvaluationError("terminal_reward returned a non-finite value")
        return out


def _check_time(problem: ControlProblem, t: float) -> None:
    if not (-1e-12 <= t <= problem.horizon + 1e-12):
        raise ValidationError(f"t={t} outside [0, {problem.horizon}]")


def _single_prefix(problem: ControlProblem, path_prefix: np.ndarray) -> np.ndarray:
    arr = np.asarray(path_prefix, dtype=float)
    if arr.ndim == 0:
        arr = arr[None]
    if arr.ndim == 1:
        if problem.state_dim == 1:
            arr = arr[:, None]
        else:
            arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != problem.state_dim:
        raise ValidationError("path prefix must have shape [num_times, state_dim]")
    return arr[None, :, :]


def eval_h(
    problem: ControlProblem,
    t: float,
    path_prefix: np.ndarray,
    z: np.ndarray,
    u: np.ndarray,
) -> float:
    """Reduced Hamiltonian h = b(t, x, u) . z - L(t, x, u) at one grid action.

    Args:
        problem: the problem datum.
        t: time in [0, horizon].
        path_prefix: observed state path up to t, shape [num_times, state_dim].
        z: adjoint vector of length noise_dim.
        u: an action that must lie on the problem's grid.

    Raises:
        ValidationError: if ``u`` is not a grid point or ``t`` is out of range.
        EvaluationError: if a coefficient returns a non-finite value.
    """
    _check_time(problem, t)
    if problem.action_set.index_of(u) < 0:
        raise ValidationError("action is not a point of the problem's action grid")
    prefixes = _single_prefix(problem, path_prefix)
    za = np.asarray(z, dtype=float).reshape(problem.noise_dim)
    ub = np.atleast_1d(np.asarray(u, dtype=float))[None, :]
    b = problem.eval_drift(t, prefixes, ub)[0]
    cost = problem.eval_cost(t, prefixes, ub)[0]
    return float(b @ za - cost)


def _table_prefix(problem: ControlProblem, count: int) -> np.ndarray:
    # Stand-in path prefix for coefficient tabulation: a problem that declares
    # state_free_coeffs never reads it, so its content is irrelevant.
    return np.broadcast_to(problem.initial_state, (count, 1, problem.state_dim))


def policy_scan(
    problem: ControlProblem,
    t: float,
    prefixes: np.ndarray,
    z: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exhaustive batched argmax of b.z - L over the action grid.

    Ties go to the first (lexicographically smallest) action because the grid
    is sorted and the running maximum only updates on strict improvement.

    Args:
        prefixes: state-path prefixes, shape [P, j+1, m].
        z: adjoint values, shape [P, d].

    Returns:
        (h_max [P], argmax index [P], drift at argmax [P, d], cost at argmax [P]).
    """
    pts = problem.action_set.points
    num = prefixes.shape[0]
    if problem.state_free_coeffs:
        fake = _table_prefix(problem, pts.shape[0])
        b_tab = problem.eval_drift(t, fake, pts)
        cost_tab = problem.eval_cost(t, fake, pts)
        h = z @ b_tab.T - cost_tab
        idx = np.argmax(h, axis=1)
        rows = np.arange(num)
        return h[rows, idx], idx.astype(np.int64), b_tab[idx], cost_tab[idx]
    h_best = np.full(num, -np.inf)
    idx_best = np.zeros(num, dtype=np.int64)
    b_best = np.zeros((num, problem.noise_dim))
    cost_best = np.zeros(num)
    for a, point in enumerate(pts):
        ub = np.broadcast_to(point, (num, pts.shape[1]))
        b = problem.eval_drift(t, prefixes, ub)
        cost = problem.eval_cost(t, prefixes, ub)
        h = np.einsum("pd,pd->p", b, z) - cost
        if a == 0:
            h_best, b_best, cost_best = h, b.copy(), cost
        else:
            mask = h > h_best
            if np.any(mask):
                h_best = np.where(mask, h, h_best)
                idx_best[mask] = a
                b_best[mask] = b[mask]
                cost_best = np.where(mask, cost, cost_best)
    return h_best, idx_best, b_best, cost_best


def full_policy_scan(
    problem: ControlProblem,
    t: float,
    prefixes: np.ndarray,
    z: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched argmax of (sigma.b).z - L over the whole grid (all levels).

    The outer maximization over volatility levels composed with the
    level-constrained inner maximization equals a single global argmax, so the
    forward engines use this scan directly.

    Returns:
        (h_max [P], argmax index [P], vol at argmax [P, m, d],
         drift at argmax [P, d], cost at argmax [P]).
    """
    pts = problem.action_set.points
    num = prefixes.shape[0]
    if problem.state_free_coeffs:
        fake = _table_prefix(problem, pts.shape[0])
        b_tab = problem.eval_drift(t, fake, pts)
        sig_tab = problem.eval_vol(t, fake, pts)
        cost_tab = problem.eval_cost(t, fake, pts)
        sb_tab = np.einsum("amd,ad->am", sig_tab, b_tab)
        h = z @ sb_tab.T - cost_tab
        idx = np.argmax(h, axis=1)
        rows = np.arange(num)
        return h[rows, idx], idx.astype(np.int64), sig_tab[idx], b_tab[idx], cost_tab[idx]
    h_best = np.full(num, -np.inf)
    idx_best = np.zeros(num, dtype=np.int64)
    sig_best = np.zeros((num, problem.state_dim, problem.noise_dim))
    b_best = np.zeros((num, problem.noise_dim))
    cost_best = np.zeros(num)
    for a, point in enumerate(pts):
        ub = np.broadcast_to(point, (num, pts.shape[1]))
        b = problem.eval_drift(t, prefixes, ub)
        sig = problem.eval_vol(t, prefixes, ub)
        cost = problem.eval_cost(t, prefixes, ub)
        sb = np.einsum("pmd,pd->pm", sig, b)
        h = np.einsum("pm,pm->p", sb, z) - cost
        if a == 0:
            h_best, sig_best, b_best, cost_best = h, sig.copy(), b.copy(), cost
        else:
            mask = h > h_best
            if np.any(mask):
                h_best = np.where(mask, h, h_best)
                idx_best[mask] = a
                sig_best[mask] = sig[mask]
                b_best[mask] = b[mask]
                cost_best = np.where(mask, cost, cost_best)
    return h_best, idx_best, sig_best, b_best, cost_best


def eval_H_argmax(
    problem: ControlProblem,
    t: float,
    path_prefix: np.ndarray,
    z: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Optimized Hamiltonian H(t, x, z) = max over the grid of h, with its argmax.

    Only defined for problems whose volatility does not depend on the action;
    ties break toward the lexicographically smallest action vector.
    """
    if problem.controlled_vol:
        raise ValidationError("eval_H_argmax requires an uncontrolled-volatility problem")
    if problem.action_set.size == 0:  # unreachable through ActionGrid, kept as a guard
        raise ValidationError("empty action grid")
    _check_time(problem, t)
    prefixes = _single_prefix(problem, path_prefix)
    za = np.asarray(z, dtype=float).reshape(1, problem.noise_dim)
    h, idx, _, _ = policy_scan(problem, t, prefixes, za)
    return float(h[0]), problem.action_set.points[int(idx[0])].copy()


def default_level_tol(levels: np.ndarray) -> float:
    """Half the minimal positive Frobenius spacing of the distinct grid levels."""
    flat = levels.reshape(levels.shape[0], -1)
    uniq = np.unique(np.round(flat, 12), axis=0)
    if uniq.shape[0] < 2:
        return 1e-9
    dists = np.sqrt(
        np.sum((uniq[:, None, :] - uniq[None, :, :]) ** 2, axis=2)
    )
    positive = dists[dists > 0]
    return float(positive.min() / 2.0) if positive.size else 1e-9


def eval_full_H_argmax(
    problem: ControlProblem,
    t: float,
    path_prefix: np.ndarray,
    z: np.ndarray,
    sigma_level: np.ndarray,
    level_tol: float | None = None,
) -> tuple[float, np.ndarray]:
    """Level-constrained Hamiltonian for controlled volatility.

    Maximizes (sigma.b).z - L over grid actions whose sigma.sigma^T at
    (t, x) lies within ``level_tol`` (Frobenius) of ``sigma_level``.

    Raises:
        EmptyLevelSetError: when no grid action matches the level; callers
            that cannot fail fall back to the nearest available level and
            count the event in their diagnostics.
    """
    if not problem.controlled_vol:
        raise ValidationError("eval_full_H_argmax requires a controlled-volatility problem")
    _check_time(problem, t)
    level = np.asarray(sigma_level, dtype=float).reshape(problem.state_dim, problem.state_dim)
    if not np.allclose(level, level.T, atol=1e-9):
        raise ValidationError("sigma_level must be symmetric")
    if np.any(np.linalg.eigvalsh(level) < -1e-9):
        raise ValidationError("sigma_level must be positive semi-definite")
    prefixes = _single_prefix(problem, path_prefix)
    za = np.asarray(z, dtype=float).reshape(problem.state_dim)
    pts = problem.action_set.points
    num_actions = pts.shape[0]
    reps = np.repeat(prefixes, num_actions, axis=0)
    sig = problem.eval_vol(t, reps, pts)
    levels = np.einsum("amd,and->amn", sig, sig)
    if level_tol is None:
        level_tol = default_level_tol(levels)
    dist = np.sqrt(np.sum((levels - level[None]) ** 2, axis=(1, 2)))
    matching = np.flatnonzero(dist <= level_tol)
    if matching.size == 0:
        raise EmptyLevelSetError(
            f"no grid action within {level_tol:g} of the requested volatility level"
        )
    b = problem.eval_drift(t, reps, pts)
    cost = problem.eval_cost(t, reps, pts)
    sb = np.einsum("amd,ad->am", sig, b)
    h = sb @ za - cost
    best_local = matching[int(np.argmax(h[matching]))]  # first max = lex smallest
    return float(h[best_local]), pts[best_local].copy()


def check_vol_smallness(
    problem: ControlProblem,
    lip_G: float,
    lip_sigma_u: float,
    lip_ustar_x: float,
    lip_sigma_x: float,
) -> bool:
    """Contraction check for the controlled-volatility iteration.

    Evaluates 8 g^2 su^2 ux^2 exp(8 (sx + su ux)^2 T) < 1 for the supplied
    Lipschitz constants (terminal reward g, volatility in the action su,
    selector in the state ux, volatility in the state sx). The constants are
    analytic properties of the user's coefficients and are not estimated here.
    """
    consts = (lip_G, lip_sigma_u, lip_ustar_x, lip_sigma_x)
    if any(c < 0 for c in consts):
        raise ValidationError("Lipschitz constants must be nonnegative")
    front = 8.0 * (lip_G * lip_sigma_u * lip_ustar_x) ** 2
    if front == 0.0:
        return True
    exponent = 8.0 * (lip_sigma_x + lip_sigma_u * lip_ustar_x) ** 2 * problem.horizon
    try:
        value = front * math.exp(exponent)
    except OverflowError:
        return False
    return value < 1.0


# -- problem registry -------------------------------------------------------

_PROBLEM_REGISTRY: dict[str, Callable[..., ControlProblem]] = {}


def register_problem(name: str, factory: Callable[..., ControlProblem], overwrite: bool = False) -> None:
    """Register a problem factory under ``name`` (keyword parameters allowed)."""
    if not overwrite and name in _PROBLEM_REGISTRY:
        raise ValidationError(f"problem '{name}' is already registered")
    _PROBLEM_REGISTRY[name] = factory


def make_problem(name: str, **params) -> ControlProblem:
    """Build a registered problem; unknown names raise with the known list."""
    try:
        factory = _PROBLEM_REGISTRY[name]
    except KeyError:
        raise RegistryError(
            f"unknown problem '{name}'; registered: {sorted(_PROBLEM_REGISTRY)}"
        ) from None
    return factory(**params)


def registered_problems() -> list[str]:
    return sorted(_PROBLEM_REGISTRY)
