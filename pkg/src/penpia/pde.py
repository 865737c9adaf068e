"""Finite-difference engine for one-dimensional Markovian problems.

The iterate with a frozen policy is computed through the exponential
transform: with ``u = exp(v / phi)`` the penalized equation for ``v``
becomes the linear parabolic equation

    u_t + (1/2) sigma^2 u_xx + sigma b u_x - (L / phi) u = 0,

solved backward from ``u(T, x) = exp(G(x) / phi)`` with a theta-weighted
(Crank-Nicolson by default) time step on a uniform space grid.  The iterate
itself is recovered as ``v = phi log u``; losing positivity of ``u`` at any
node is a hard failure.  A companion sweep solves the untransformed
equation directly, treating the quadratic gradient term as an explicit
source from the layer above -- the two routes must agree and their gap is a
standing consistency diagnostic.  A policy-iteration sweep on the same
stencils solves the unpenalized dynamic-programming equation and serves as
the grid reference, including a variant for action-dependent volatility
where the per-node argmax weighs the second-derivative term as well.

Discretization conventions, shared by every solver here: first-order
upwind differencing for the drift, second-order central differencing for
the diffusion, and zero-second-derivative boundary rows (the diffusion
term is dropped at the two boundary nodes and the drift uses the one-sided
difference that points into the domain).  Those boundary rows are exact
for affine solutions and keep the stencil tridiagonal, but they do perturb
curved solutions near the edges, so all field comparisons -- including the
gap metrics of the iteration ladder -- are taken over the central window
``[x_min / 2, x_max / 2]`` where the boundary influence has died out.

Gradients of a solved field are always formed the same way: central
differences inside, one-sided at the edges, scaled by the volatility, so
that the grid feedback field matches what the regression estimators
produce in the Monte Carlo pipeline.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import (
    EvaluationError,
    InstabilityError,
    InsufficientDataError,
    PositivityError,
    ValidationError,
)
from .problems import ControlProblem, PenaltySchedule, policy_scan
from .report import (
    ConvergenceReport,
    IterationRecord,
    ReferenceValue,
    atomic_write_text,
    fit_rate,
    format_cell,
    runtime_versions,
)

__all__ = [
    "GridSpec",
    "GridField",
    "central_window_mask",
    "solve_colehopf_iterate",
    "solve_quadratic_iterate",
    "solve_hjb_reference",
    "solve_vol_hjb_reference",
    "run_pia_pde",
    "export_grid_csv",
]

logger = logging.getLogger(__name__)

#: Cap on policy-refresh sweeps inside one implicit time step.
_MAX_POLICY_SWEEPS = 10

#: Fraction of nodes still switching actions at the cap that triggers a warning.
_POLICY_WARN_FRACTION = 0.01

#: A node switches its action only when the new one scores at least this much
#: better; exact grid ties would otherwise flip-flop forever.
_POLICY_SWITCH_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time grid for the finite-difference solvers.

    ``theta`` weighs the implicit part of the time step: 0 is fully
    explicit, 1 fully implicit, 0.5 the trapezoidal default.
    """

    x_min: float
    x_max: float
    num_nodes: int = 401
    num_time_steps: int = 400
    theta: float = 0.5

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max):
            raise ValidationError("grid requires x_min < x_max")
        if self.num_nodes < 3:
            raise ValidationError("grid needs at least 3 space nodes")
        if self.num_time_steps < 1:
            raise ValidationError("grid needs at least 1 time step")
        if not (0.0 <= self.theta <= 1.0):
            raise ValidationError("theta must lie in [0, 1]")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.num_nodes)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.num_nodes - 1)

    def time_step(self, horizon: float) -> float:
        return horizon / self.num_time_steps

    def times(self, horizon: float) -> np.ndarray:
        return np.linspace(0.0, horizon, self.num_time_steps + 1)

    def refined(self) -> "GridSpec":
        """The same domain with both mesh widths halved."""
        return GridSpec(
            x_min=self.x_min,
            x_max=self.x_max,
            num_nodes=2 * (self.num_nodes - 1) + 1,
            num_time_steps=2 * self.num_time_steps,
            theta=self.theta,
        )

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "x_max": self.x_max,
            "num_nodes": self.num_nodes,
            "num_time_steps": self.num_time_steps,
            "theta": self.theta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        if not isinstance(d, dict):
            raise ValidationError("grid must be an object")
        extra = set(d) - {"x_min", "x_max", "num_nodes", "num_time_steps", "theta"}
        if extra:
            raise ValidationError(f"unknown grid keys: {sorted(extra)}")
        if "x_min" not in d or "x_max" not in d:
            raise ValidationError("grid requires x_min and x_max")
        return cls(
            x_min=float(d["x_min"]),
            x_max=float(d["x_max"]),
            num_nodes=int(d.get("num_nodes", 401)),
            num_time_steps=int(d.get("num_time_steps", 400)),
            theta=float(d.get("theta", 0.5)),
        )


@dataclass(frozen=True)
class GridField:
    """A scalar field on a :class:`GridSpec`: one row per time layer."""

    spec: GridSpec
    horizon: float
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.horizon <= 0:
            raise ValidationError("horizon must be positive")
        vals = np.asarray(self.values, dtype=float)
        expected = (self.spec.num_time_steps + 1, self.spec.num_nodes)
        if vals.shape != expected:
            raise ValidationError(
                f"field values must have shape {expected}, got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValidationError("field values must be finite")
        object.__setattr__(self, "values", vals)
        self.values.setflags(write=False)

    @classmethod
    def zeros(cls, spec: GridSpec, horizon: float) -> "GridField":
        return cls(spec, horizon, np.zeros((spec.num_time_steps + 1, spec.num_nodes)))

    @property
    def times(self) -> np.ndarray:
        return self.spec.times(self.horizon)

    def at_initial(self, x: float) -> float:
        """Linear interpolation of the t=0 layer at ``x``."""
        if not (self.spec.x_min <= x <= self.spec.x_max):
            raise ValidationError(f"x={x} outside the grid domain")
        return float(np.interp(x, self.spec.nodes, self.values[0]))


def central_window_mask(spec: GridSpec) -> np.ndarray:
    """Node mask for the comparison window [x_min/2, x_max/2]."""
    nodes = spec.nodes
    return (nodes >= spec.x_min / 2.0 - 1e-12) & (nodes <= spec.x_max / 2.0 + 1e-12)


# -- stencil assembly and the theta step -------------------------------------


def _operator(diff: np.ndarray, drift: np.ndarray, reaction: np.ndarray, dx: float):
    """Tridiagonal generator rows (lower, main, upper) for one time layer.

    Interior rows combine central diffusion, upwind drift and the reaction
    term; boundary rows drop the diffusion (zero-second-derivative closure)
    and difference the drift one-sidedly into the domain.
    """
    second = diff / (dx * dx)
    lower = np.empty_like(diff)
    main = np.empty_like(diff)
    upper = np.empty_like(diff)
    lower[1:-1] = second[1:-1] + np.maximum(-drift[1:-1], 0.0) / dx
    upper[1:-1] = second[1:-1] + np.maximum(drift[1:-1], 0.0) / dx
    main[1:-1] = -2.0 * second[1:-1] - np.abs(drift[1:-1]) / dx + reaction[1:-1]
    lower[0] = 0.0
    upper[0] = drift[0] / dx
    main[0] = -drift[0] / dx + reaction[0]
    upper[-1] = 0.0
    lower[-1] = -drift[-1] / dx
    main[-1] = drift[-1] / dx + reaction[-1]
    return lower, main, upper


def _apply_operator(op, v: np.ndarray) -> np.ndarray:
    lower, main, upper = op
    out = main * v
    out[1:] += lower[1:] * v[:-1]
    out[:-1] += upper[:-1] * v[1:]
    return out


def _theta_solve(
    v_next: np.ndarray,
    tau: float,
    theta: float,
    op_impl,
    op_expl,
    source: np.ndarray,
) -> np.ndarray:
    """One backward step of (I - tau theta A) v = (I + tau (1-theta) A') v' + tau s."""
    rhs = v_next + tau * (1.0 - theta) * _apply_operator(op_expl, v_next) + tau * source
    lower, main, upper = op_impl
    num = main.size
    bands = np.zeros((3, num))
    bands[0, 1:] = -tau * theta * upper[:-1]
    bands[1, :] = 1.0 - tau * theta * main
    bands[2, :-1] = -tau * theta * lower[1:]
    return solve_banded((1, 1), bands, rhs, overwrite_ab=True, overwrite_b=True)


def _gradient(values: np.ndarray, dx: float) -> np.ndarray:
    """Central differences inside, one-sided at the edges (any -1 axis)."""
    return np.gradient(values, dx, axis=-1)


def _second_difference(values: np.ndarray, dx: float) -> np.ndarray:
    """Central second difference, zero at the boundary rows by convention."""
    out = np.zeros_like(values)
    out[1:-1] = (values[2:] - 2.0 * values[1:-1] + values[:-2]) / (dx * dx)
    return out


# -- coefficient evaluation on node batches ----------------------------------


def _check_grid_problem(problem: ControlProblem, spec: GridSpec, controlled: bool) -> None:
    if problem.controlled_vol != controlled:
        kind = "an action-dependent" if controlled else "a fixed"
        raise ValidationError(f"this solver requires {kind} volatility coefficient")
    if not problem.markovian:
        raise ValidationError("grid solvers require a Markovian problem")
    if problem.state_dim != 1 or problem.noise_dim != 1:
        raise ValidationError("grid solvers cover one-dimensional problems only")
    x0 = float(problem.initial_state[0])
    if not (spec.x_min < x0 < spec.x_max):
        raise ValidationError(
            f"initial state {x0} must lie strictly inside [{spec.x_min}, {spec.x_max}]"
        )


def _node_prefixes(nodes: np.ndarray) -> np.ndarray:
    # Each grid node doubles as a length-one path prefix.
    return nodes[:, None, None]


def _layer_sigma(problem: ControlProblem, t: float, nodes: np.ndarray) -> np.ndarray:
    """Volatility per node for an action-independent diffusion coefficient."""
    prefixes = _node_prefixes(nodes)
    any_action = np.broadcast_to(
        problem.action_set.points[0], (nodes.size, problem.action_dim)
    )
    return problem.eval_vol(t, prefixes, any_action)[:, 0, 0]


def _layer_policy(problem: ControlProblem, t: float, nodes: np.ndarray, z: np.ndarray):
    """Grid argmax of b.z - L per node: (indices, drift, cost)."""
    _, idx, b, cost = policy_scan(problem, t, _node_prefixes(nodes), z[:, None])
    return idx, b[:, 0], cost


def _vol_action_tables(problem: ControlProblem, t: float, nodes: np.ndarray):
    """Per-(action, node) volatility, drift and cost tables, shape [A, M]."""
    pts = problem.action_set.points
    num_actions, num_nodes = pts.shape[0], nodes.size
    if problem.state_free_coeffs:
        fake = np.broadcast_to(problem.initial_state, (num_actions, 1, 1))
        sig = problem.eval_vol(t, fake, pts)[:, 0, 0]
        b = problem.eval_drift(t, fake, pts)[:, 0]
        cost = problem.eval_cost(t, fake, pts)
        shape = (num_actions, num_nodes)
        return (
            np.broadcast_to(sig[:, None], shape),
            np.broadcast_to(b[:, None], shape),
            np.broadcast_to(cost[:, None], shape),
        )
    prefixes = _node_prefixes(nodes)
    sig = np.empty((num_actions, num_nodes))
    b = np.empty((num_actions, num_nodes))
    cost = np.empty((num_actions, num_nodes))
    for a, point in enumerate(pts):
        ub = np.broadcast_to(point, (num_nodes, pts.shape[1]))
        sig[a] = problem.eval_vol(t, prefixes, ub)[:, 0, 0]
        b[a] = problem.eval_drift(t, prefixes, ub)[:, 0]
        cost[a] = problem.eval_cost(t, prefixes, ub)
    return sig, b, cost


def _terminal_values(problem: ControlProblem, nodes: np.ndarray) -> np.ndarray:
    return problem.eval_terminal(_node_prefixes(nodes))


def _require_grad_field(
    problem: ControlProblem, spec: GridSpec, grad_prev: GridField | None
) -> np.ndarray:
    if grad_prev is None:
        return np.zeros((spec.num_time_steps + 1, spec.num_nodes))
    if grad_prev.spec != spec:
        raise ValidationError("grad_prev lives on a different grid")
    if abs(grad_prev.horizon - problem.horizon) > 1e-12:
        raise ValidationError("grad_prev horizon does not match the problem")
    return grad_prev.values


# -- solvers ------------------------------------------------------------------


def solve_colehopf_iterate(
    problem: ControlProblem,
    spec: GridSpec,
    phi_n: float,
    grad_prev: GridField | None,
) -> tuple[GridField, GridField, GridField]:
    """One penalized iterate through the exponential transform.

    The policy is frozen at the previous feedback field ``grad_prev``
    (``None`` means the zero field that seeds the ladder).  Returns the
    transformed solution ``u``, the iterate ``v = phi_n log u`` and the new
    feedback field ``sigma * dv/dx``, each on the full space-time grid.

    Raises:
        PositivityError: if ``u`` drops to zero or below at any node.
        InstabilityError: if the step produces non-finite values.
    """
    _check_grid_problem(problem, spec, controlled=False)
    if phi_n < 1.0:
        raise ValidationError(f"phi must be >= 1, got {phi_n}")
    z_prev = _require_grad_field(problem, spec, grad_prev)
    nodes = spec.nodes
    dx = spec.dx
    tau = spec.time_step(problem.horizon)
    times = spec.times(problem.horizon)
    num_steps = spec.num_time_steps

    reward = _terminal_values(problem, nodes)
    u = np.empty((num_steps + 1, nodes.size))
    with np.errstate(over="raise"):
        try:
            u[num_steps] = np.exp(reward / phi_n)
        except FloatingPointError:
            raise EvaluationError(
                "terminal exponential overflowed; the reward is too large for "
                f"phi={phi_n}"
            ) from None

    sigma = np.empty((num_steps + 1, nodes.size))

    def layer_operator(j: int):
        sigma[j] = _layer_sigma(problem, times[j], nodes)
        _, b, cost = _layer_policy(problem, times[j], nodes, z_prev[j])
        diff = 0.5 * sigma[j] * sigma[j]
        return _operator(diff, sigma[j] * b, -cost / phi_n, dx)

    op_next = layer_operator(num_steps)
    zero_source = np.zeros(nodes.size)
    for j in range(num_steps - 1, -1, -1):
        op_here = layer_operator(j)
        u[j] = _theta_solve(u[j + 1], tau, spec.theta, op_here, op_next, zero_source)
        if not np.all(np.isfinite(u[j])):
            raise InstabilityError(
                f"transformed solve produced non-finite values at layer {j}"
            )
        if np.any(u[j] <= 0.0):
            raise PositivityError(
                f"exponential-transform solution lost positivity at layer {j} "
                f"(t={times[j]:.6g}); refine the grid or lower theta's explicit part"
            )
        op_next = op_here

    v = phi_n * np.log(u)
    grad = sigma * _gradient(v, dx)
    horizon = problem.horizon
    return (
        GridField(spec, horizon, u),
        GridField(spec, horizon, v),
        GridField(spec, horizon, grad),
    )


def solve_quadratic_iterate(
    problem: ControlProblem,
    spec: GridSpec,
    phi_n: float,
    grad_prev: GridField | None,
) -> tuple[GridField, GridField]:
    """The same iterate without the transform, quadratic term as a source.

    Solves the untransformed equation for ``v`` directly; the quadratic
    gradient term ``|sigma v_x|^2 / (2 phi)`` is evaluated explicitly on the
    layer above and added to the source, everything else is stepped exactly
    like the linear solvers.  Serves as the consistency cross-check for
    :func:`solve_colehopf_iterate`; the two agree up to discretization error.
    """
    _check_grid_problem(problem, spec, controlled=False)
    if phi_n < 1.0:
        raise ValidationError(f"phi must be >= 1, got {phi_n}")
    z_prev = _require_grad_field(problem, spec, grad_prev)
    nodes = spec.nodes
    dx = spec.dx
    tau = spec.time_step(problem.horizon)
    times = spec.times(problem.horizon)
    num_steps = spec.num_time_steps

    v = np.empty((num_steps + 1, nodes.size))
    v[num_steps] = _terminal_values(problem, nodes)
    sigma = np.empty((num_steps + 1, nodes.size))
    costs = np.empty((num_steps + 1, nodes.size))

    def layer_operator(j: int):
        sigma[j] = _layer_sigma(problem, times[j], nodes)
        _, b, cost = _layer_policy(problem, times[j], nodes, z_prev[j])
        costs[j] = cost
        diff = 0.5 * sigma[j] * sigma[j]
        return _operator(diff, sigma[j] * b, np.zeros(nodes.size), dx)

    op_next = layer_operator(num_steps)
    theta = spec.theta
    for j in range(num_steps - 1, -1, -1):
        op_here = layer_operator(j)
        quad = (sigma[j + 1] * _gradient(v[j + 1], dx)) ** 2 / (2.0 * phi_n)
        source = -(theta * costs[j] + (1.0 - theta) * costs[j + 1]) + quad
        v[j] = _theta_solve(v[j + 1], tau, theta, op_here, op_next, source)
        if not np.all(np.isfinite(v[j])):
            raise InstabilityError(
                f"quadratic-source solve produced non-finite values at layer {j}"
            )
        op_next = op_here

    grad = sigma * _gradient(v, dx)
    return GridField(spec, problem.horizon, v), GridField(spec, problem.horizon, grad)


def solve_hjb_reference(
    problem: ControlProblem, spec: GridSpec
) -> tuple[GridField, GridField]:
    """Grid reference for the unpenalized problem by policy iteration.

    Each backward step freezes the action per node at the argmax for the
    previous layer's feedback field, solves the resulting linear step, then
    refreshes the argmax at the new layer and re-solves until the per-node
    actions stop changing (capped at ten sweeps; more than 1% of nodes
    still switching at the cap is logged as a warning).  Returns the value
    field and its feedback field ``sigma * dv/dx``.
    """
    _check_grid_problem(problem, spec, controlled=False)
    nodes = spec.nodes
    dx = spec.dx
    tau = spec.time_step(problem.horizon)
    times = spec.times(problem.horizon)
    num_steps = spec.num_time_steps

    v = np.empty((num_steps + 1, nodes.size))
    v[num_steps] = _terminal_values(problem, nodes)
    sigma = np.empty((num_steps + 1, nodes.size))
    for j in range(num_steps + 1):
        sigma[j] = _layer_sigma(problem, times[j], nodes)
    diffs = 0.5 * sigma * sigma

    for j in range(num_steps - 1, -1, -1):
        z_next = sigma[j + 1] * _gradient(v[j + 1], dx)
        _, b_expl, cost_expl = _layer_policy(problem, times[j + 1], nodes, z_next)
        op_expl = _operator(diffs[j + 1], sigma[j + 1] * b_expl, np.zeros(nodes.size), dx)

        z_guess = z_next
        b_used = cost_used = None
        v_here = v[j + 1]
        for sweep in range(_MAX_POLICY_SWEEPS + 1):
            _, b, cost = _layer_policy(problem, times[j], nodes, z_guess)
            if b_used is not None:
                switch = b * z_guess - cost > b_used * z_guess - cost_used + _POLICY_SWITCH_TOL
                if not np.any(switch):
                    break
                if sweep == _MAX_POLICY_SWEEPS:
                    frac = float(np.mean(switch))
                    if frac > _POLICY_WARN_FRACTION:
                        logger.warning(
                            "policy refresh did not settle at layer %d: %.1f%% of "
                            "nodes still switching after %d sweeps",
                            j, 100.0 * frac, _MAX_POLICY_SWEEPS,
                        )
                    break
                b = np.where(switch, b, b_used)
                cost = np.where(switch, cost, cost_used)
            b_used, cost_used = b, cost
            op_impl = _operator(diffs[j], sigma[j] * b, np.zeros(nodes.size), dx)
            source = -(spec.theta * cost + (1.0 - spec.theta) * cost_expl)
            v_here = _theta_solve(v[j + 1], tau, spec.theta, op_impl, op_expl, source)
            z_guess = sigma[j] * _gradient(v_here, dx)
        if not np.all(np.isfinite(v_here)):
            raise InstabilityError(f"reference solve produced non-finite values at layer {j}")
        v[j] = v_here

    grad = sigma * _gradient(v, dx)
    return GridField(spec, problem.horizon, v), GridField(spec, problem.horizon, grad)


def solve_vol_hjb_reference(
    problem: ControlProblem, spec: GridSpec
) -> tuple[GridField, GridField]:
    """Grid reference for action-dependent volatility by per-node argmax.

    The argmax at each node weighs the full generator -- half the squared
    volatility against the second difference, the effective drift against
    the first -- so the chosen action controls the diffusion coefficient of
    the implicit step.  The policy refresh works as in
    :func:`solve_hjb_reference`.  Returns the value field and the feedback
    field formed with the volatility of the chosen actions.
    """
    _check_grid_problem(problem, spec, controlled=True)
    nodes = spec.nodes
    dx = spec.dx
    tau = spec.time_step(problem.horizon)
    times = spec.times(problem.horizon)
    num_steps = spec.num_time_steps
    cols = np.arange(nodes.size)

    def layer_scores(values: np.ndarray, tables) -> np.ndarray:
        sig, b, cost = tables
        vx = _gradient(values, dx)
        vxx = _second_difference(values, dx)
        return 0.5 * sig * sig * vxx[None, :] + sig * b * vx[None, :] - cost

    def frozen_coeffs(idx: np.ndarray, tables):
        sig, b, cost = tables
        sig_n = sig[idx, cols]
        return sig_n, sig_n * b[idx, cols], cost[idx, cols]

    v = np.empty((num_steps + 1, nodes.size))
    v[num_steps] = _terminal_values(problem, nodes)
    sigma_used = np.empty((num_steps + 1, nodes.size))

    tables_next = _vol_action_tables(problem, times[num_steps], nodes)
    # argmax takes the first maximizer, i.e. the lexicographically smallest action
    idx_term = np.argmax(layer_scores(v[num_steps], tables_next), axis=0)
    sig_term, drift_term, cost_expl = frozen_coeffs(idx_term, tables_next)
    sigma_used[num_steps] = sig_term
    op_expl = _operator(0.5 * sig_term * sig_term, drift_term, np.zeros(nodes.size), dx)

    for j in range(num_steps - 1, -1, -1):
        tables_here = _vol_action_tables(problem, times[j], nodes)
        v_here = v[j + 1]
        idx_used = None
        for sweep in range(_MAX_POLICY_SWEEPS + 1):
            score = layer_scores(v_here, tables_here)
            idx = np.argmax(score, axis=0)
            if idx_used is not None:
                switch = score[idx, cols] > score[idx_used, cols] + _POLICY_SWITCH_TOL
                if not np.any(switch):
                    break
                if sweep == _MAX_POLICY_SWEEPS:
                    frac = float(np.mean(switch))
                    if frac > _POLICY_WARN_FRACTION:
                        logger.warning(
                            "volatility policy refresh did not settle at layer %d: "
                            "%.1f%% of nodes still switching after %d sweeps",
                            j, 100.0 * frac, _MAX_POLICY_SWEEPS,
                        )
                    break
                idx = np.where(switch, idx, idx_used)
            idx_used = idx
            sig_here, drift_here, cost_here = frozen_coeffs(idx, tables_here)
            op_impl = _operator(0.5 * sig_here * sig_here, drift_here, np.zeros(nodes.size), dx)
            source = -(spec.theta * cost_here + (1.0 - spec.theta) * cost_expl)
            v_here = _theta_solve(v[j + 1], tau, spec.theta, op_impl, op_expl, source)
        if not np.all(np.isfinite(v_here)):
            raise InstabilityError(f"reference solve produced non-finite values at layer {j}")
        v[j] = v_here
        # freeze the explicit half of the next step at this layer's own optimum
        idx_opt = np.argmax(layer_scores(v[j], tables_here), axis=0)
        sig_opt, drift_opt, cost_expl = frozen_coeffs(idx_opt, tables_here)
        sigma_used[j] = sig_opt
        op_expl = _operator(0.5 * sig_opt * sig_opt, drift_opt, np.zeros(nodes.size), dx)

    grad = sigma_used * _gradient(v, dx)
    return GridField(spec, problem.horizon, v), GridField(spec, problem.horizon, grad)


# -- the grid iteration ladder -------------------------------------------------


def _action_fields(problem: ControlProblem, spec: GridSpec, horizon: float, grad_values: np.ndarray) -> np.ndarray:
    """Per-layer argmax actions induced by a feedback field, shape [N+1, M, k]."""
    nodes = spec.nodes
    times = spec.times(horizon)
    out = np.empty((grad_values.shape[0], nodes.size, problem.action_dim))
    for j, t in enumerate(times):
        idx, _, _ = _layer_policy(problem, t, nodes, grad_values[j])
        out[j] = problem.action_set.points[idx]
    return out


def _window_gap(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    return float(np.max(np.abs(a[:, mask] - b[:, mask])))


def _window_square_distance(
    a: np.ndarray, b: np.ndarray, mask: np.ndarray, tau: float
) -> float:
    """Window-averaged integrated squared field change, left-endpoint rule."""
    gap = a[:-1, mask] - b[:-1, mask]
    if gap.ndim == 3:  # action fields carry a trailing component axis
        per_node = np.sum(gap * gap, axis=(0, 2)) * tau
    else:
        per_node = np.sum(gap * gap, axis=0) * tau
    return float(np.mean(per_node))


def run_pia_pde(
    problem: ControlProblem,
    spec: GridSpec,
    schedule: PenaltySchedule,
    n_max: int,
    config: dict | None = None,
    rate_floor: float | None = None,
    record_timings: bool = False,
) -> ConvergenceReport:
    """Iteration ladder on the grid, compared against the grid reference.

    Runs ``n_max + 1`` penalized iterates seeded by the zero feedback field,
    with the reference computed once by :func:`solve_hjb_reference`.  Each
    record's ``err`` is the sup-norm gap to the reference over the central
    window and all time layers; ``z_distance`` and ``control_distance``
    track the integrated squared movement of the feedback and action fields
    between consecutive iterates.  The decay rate is fitted on the errors
    above the numerical floor (1.5 times the smallest observed error unless
    ``rate_floor`` overrides it).  A positivity or stability failure stops
    the ladder and marks the report partial.
    """
    _check_grid_problem(problem, spec, controlled=False)
    if n_max < 0:
        raise ValidationError("n_max must be >= 0")
    v_ref, _ = solve_hjb_reference(problem, spec)
    horizon = problem.horizon
    x0 = float(problem.initial_state[0])
    mask = central_window_mask(spec)
    tau = spec.time_step(horizon)

    grad_prev = GridField.zeros(spec, horizon)
    actions_prev = _action_fields(problem, spec, horizon, grad_prev.values)
    records = []
    partial = False
    for n in range(n_max + 1):
        phi_n = float(schedule(n))
        start = time.perf_counter()
        try:
            _, v_n, grad_n = solve_colehopf_iterate(problem, spec, phi_n, grad_prev)
        except (PositivityError, InstabilityError) as exc:
            logger.warning("grid ladder aborted at n=%d: %s", n, exc)
            partial = True
            break
        wall_ms = (time.perf_counter() - start) * 1e3 if record_timings else 0.0
        actions_n = _action_fields(problem, spec, horizon, grad_n.values)
        records.append(
            IterationRecord(
                n=n,
                phi_n=phi_n,
                value=v_n.at_initial(x0),
                stderr=None,
                err=_window_gap(v_n.values, v_ref.values, mask),
                z_distance=_window_square_distance(
                    grad_n.values, grad_prev.values, mask, tau
                ),
                control_distance=_window_square_distance(
                    actions_n, actions_prev, mask, tau
                ),
                wall_ms=wall_ms,
            )
        )
        grad_prev = grad_n
        actions_prev = actions_n

    fitted_rate = None
    errs = [record.err for record in records]
    if len(errs) >= 3:
        floor = rate_floor if rate_floor is not None else 1.5 * min(errs)
        try:
            fitted_rate = fit_rate(errs, floor=floor)[0]
        except InsufficientDataError:
            fitted_rate = None

    if config is None:
        config = {
            "mode": "pde_markovian",
            "problem": problem.name,
            "schedule": schedule.to_dict(),
            "n_max": n_max,
            "grid": spec.to_dict(),
        }
    return ConvergenceReport(
        config=config,
        records=tuple(records),
        reference=ReferenceValue(value=v_ref.at_initial(x0), provenance="pde-oracle"),
        fitted_rate=fitted_rate,
        seed=0,
        versions=runtime_versions(),
        partial=partial,
    )


def export_grid_csv(field: GridField, path) -> None:
    """Write a field as CSV: x nodes in the header, one row per time layer."""
    header = "t," + ",".join(format_cell(x) for x in field.spec.nodes)
    lines = [header]
    for t, row in zip(field.times, field.values):
        lines.append(format_cell(t) + "," + ",".join(format_cell(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")
