"""Backward solvers on path ensembles.

Three jobs live here:

* the explicit log-exponential evaluation of each policy iterate,
  ``value = phi * log E_w[exp(F / phi)]`` with Girsanov weights ``w`` frozen
  at the previous adjoint estimate;
* extraction of the adjoint process Z by martingale-increment regression;
* a generic quadratic-driver BSDE solver used as an independent reference.

Conditional expectations are realized by global polynomial least squares per
time step (deterministic given the paths). All exponentials are taken after
subtracting the running maximum, and values are reassembled through
``expm1``/``log1p`` so the estimator stays exact-to-rounding even when the
penalty parameter reaches 1e6 and ``F/phi`` collapses toward zero.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from ._parallel import run_chunked
from .errors import (
    BasisError,
    InstabilityError,
    InsufficientDataError,
    ValidationError,
)
from .paths import PathEnsemble, girsanov_log_weights
from .problems import ControlProblem, full_policy_scan, policy_scan

__all__ = [
    "RegressionBasis",
    "ZRepresentation",
    "BackwardSolution",
    "PolicyFields",
    "compute_policy_fields",
    "terminal_functional",
    "explicit_iterate_value",
    "estimate_Z",
    "solve_reference_bsde",
]

logger = logging.getLogger(__name__)

_BASIS_KINDS = ("markov-poly", "path-poly")
_COND_LIMIT = 1e12


@dataclass(frozen=True)
class RegressionBasis:
    """Feature map for per-time-step conditional expectations.

    ``markov-poly`` uses all monomials of the current state up to ``degree``.
    ``path-poly`` adds three path statistics for path-dependent terminal
    functionals: the accumulated running cost to date and the running mean
    and running maximum of the first state coordinate.
    """

    kind: str = "markov-poly"
    degree: int = 3
    ridge: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in _BASIS_KINDS:
            raise ValidationError(f"unknown basis kind {self.kind!r}; expected one of {_BASIS_KINDS}")
        if self.degree < 1:
            raise ValidationError("basis degree must be at least 1")
        if self.ridge < 0:
            raise ValidationError("ridge must be nonnegative")

    def features(self, prefixes: np.ndarray, running_cost: np.ndarray | None = None) -> np.ndarray:
        """Feature matrix [paths x features]; the intercept is added by the fitter.

        ``running_cost`` is the accumulated running cost to date (zeros when
        not supplied); it only enters the ``path-poly`` feature set.
        """
        current = prefixes[:, -1, :]
        cols = []
        dims = range(current.shape[1])
        for deg in range(1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(dims, deg):
                col = np.ones(current.shape[0])
                for i in combo:
                    col = col * current[:, i]
                cols.append(col)
        if self.kind == "path-poly":
            num = prefixes.shape[0]
            cost = np.zeros(num) if running_cost is None else np.asarray(running_cost, dtype=float)
            cols.append(cost)
            cols.append(prefixes[:, :, 0].mean(axis=1))
            cols.append(prefixes[:, :, 0].max(axis=1))
        out = np.column_stack(cols)
        if not np.all(np.isfinite(out)):
            raise ValidationError("basis features are not finite on the sampled states")
        return out


@dataclass
class _StepFit:
    """One step's standardized least-squares fit (intercept unpenalized)."""

    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray
    coef: np.ndarray  # [(kept columns)+1, targets], intercept first

    def evaluate(self, features: np.ndarray) -> np.ndarray:
        x = (features[:, self.kept] - self.mean) / self.std
        return self.coef[0] + x @ self.coef[1:]


def _fit_step(
    features: np.ndarray, targets: np.ndarray, ridge: float, step: int
) -> tuple[_StepFit, np.ndarray]:
    """Ridge fit of targets [P x K] on standardized features plus intercept.

    Constant columns are dropped (the intercept carries them); the intercept
    itself is never penalized, so fitted values preserve the target mean
    exactly. Returns the fit and the in-sample fitted values.
    """
    num = features.shape[0]
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    kept = std > 0.0
    if (int(kept.sum()) + 1) * 10 > num:
        raise InsufficientDataError(
            f"step {step}: {int(kept.sum()) + 1} regression columns need at least "
            f"{(int(kept.sum()) + 1) * 10} paths, got {num}"
        )
    x = (features[:, kept] - mean[kept]) / std[kept]
    design = np.column_stack([np.ones(num), x])
    cond = np.linalg.cond(design)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise BasisError(f"regression design ill-conditioned at step {step} (cond={cond:.3g})")
    gram = design.T @ design
    penalty = ridge * np.eye(gram.shape[0])
    penalty[0, 0] = 0.0
    rhs = design.T @ targets
    coef = np.linalg.solve(gram + penalty, rhs)
    fit = _StepFit(mean=mean[kept], std=std[kept], kept=kept, coef=coef)
    return fit, design @ coef


@dataclass
class ZRepresentation:
    """Adjoint estimate as per-step regression coefficients, norm-clipped.

    ``step_fits[j] is None`` encodes the zero field at step j; the
    all-``None`` representation is the scheme's starting convention (the
    iteration before the first one carries Z identically zero).
    """

    basis: RegressionBasis
    clip: float
    noise_dim: int
    step_fits: list
    clip_events: int = 0

    def __post_init__(self) -> None:
        if self.clip <= 0:
            raise ValidationError("clip must be positive")

    @classmethod
    def zero(cls, basis: RegressionBasis, clip: float, noise_dim: int, num_steps: int) -> "ZRepresentation":
        return cls(basis=basis, clip=clip, noise_dim=noise_dim, step_fits=[None] * num_steps)

    @property
    def num_steps(self) -> int:
        return len(self.step_fits)

    def evaluate(
        self, step: int, prefixes: np.ndarray, running_cost: np.ndarray | None = None
    ) -> np.ndarray:
        """Clipped field values [paths x noise_dim] at one time step."""
        if not 0 <= step < self.num_steps:
            raise ValidationError(f"step {step} outside [0, {self.num_steps})")
        num = prefixes.shape[0]
        fit = self.step_fits[step]
        if fit is None:
            return np.zeros((num, self.noise_dim))
        raw = fit.evaluate(self.basis.features(prefixes, running_cost))
        return _norm_clip(raw, self.clip)[0]


def _norm_clip(values: np.ndarray, clip: float) -> tuple[np.ndarray, int]:
    norms = np.linalg.norm(values, axis=1)
    over = norms > clip
    if not np.any(over):
        return values, 0
    scale = np.ones_like(norms)
    scale[over] = clip / norms[over]
    return values * scale[:, None], int(over.sum())


@dataclass
class BackwardSolution:
    """Backward process on the ensemble: y [paths x (steps+1)] plus its start.

    ``value`` equals the average of ``y[:, 0]`` (all paths share the trivial
    initial filtration); ``stderr`` is the delta-method standard error of the
    value estimator; ``positivity_clips`` counts conditional estimates that
    had to be clamped back into the sampled target range before the
    logarithm.
    """

    y: np.ndarray
    z: ZRepresentation | None
    value: float
    stderr: float | None = None
    positivity_clips: int = 0


@dataclass(frozen=True)
class PolicyFields:
    """Coefficients along the frozen policy: Girsanov kernel, cost, actions."""

    theta: np.ndarray  # [P, N, d]
    cost: np.ndarray  # [P, N]
    actions: np.ndarray  # [P, N, k]


def compute_policy_fields(
    problem: ControlProblem,
    ensemble: PathEnsemble,
    z_prev: ZRepresentation,
    workers: int = 1,
) -> PolicyFields:
    """Evaluate the frozen policy u*(t, X, z_prev) along the ensemble.

    A controlled-volatility ensemble already carries these fields from its
    own forward scan (the scan is deterministic, so re-deriving them would
    reproduce the cache); they are returned directly in that case.
    """
    if (
        ensemble.policy_drift is not None
        and ensemble.policy_cost is not None
        and ensemble.policy_actions is not None
    ):
        return PolicyFields(
            theta=ensemble.policy_drift, cost=ensemble.policy_cost, actions=ensemble.policy_actions
        )
    num_paths = ensemble.num_paths
    num_steps = ensemble.grid.num_steps
    times = ensemble.grid.times
    points = problem.action_set.points
    theta = np.empty((num_paths, num_steps, problem.noise_dim))
    cost = np.empty((num_paths, num_steps))
    actions = np.empty((num_paths, num_steps, problem.action_dim))
    scan = full_policy_scan if problem.controlled_vol else policy_scan

    def work(lo: int, hi: int) -> None:
        for j in range(num_steps):
            prefixes = ensemble.states[lo:hi, : j + 1]
            z = z_prev.evaluate(j, prefixes)
            out = scan(problem, times[j], prefixes, z)
            if problem.controlled_vol:
                _, idx, _, b, ell = out
            else:
                _, idx, b, ell = out
            theta[lo:hi, j] = b
            cost[lo:hi, j] = ell
            actions[lo:hi, j] = points[idx]

    run_chunked(work, num_paths, workers)
    return PolicyFields(theta=theta, cost=cost, actions=actions)


def terminal_functional(
    problem: ControlProblem,
    ensemble: PathEnsemble,
    z_prev: ZRepresentation,
    policy: PolicyFields | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Per-path terminal reward minus the running cost along the frozen policy.

    Left-point Riemann sum: F = G(X) - sum_j L(t_j, X, u*_j) * dt.
    """
    if policy is None:
        policy = compute_policy_fields(problem, ensemble, z_prev, workers)
    reward = problem.eval_terminal(ensemble.states)
    return reward - policy.cost.sum(axis=1) * ensemble.grid.step


def _clamped_growth(
    fit_q: np.ndarray, fit_d: np.ndarray, low: float, high: float
) -> tuple[np.ndarray, int]:
    """Conditional growth factor 1 + E[w d]/E[w], clamped to the target range.

    A conditional mean of exp(fut/phi) lies between the smallest and largest
    sampled value of that exponential under any reweighting, so regression
    overshoot outside [low, high] is projected back onto the achievable
    interval; a denominator fit that is not strictly positive makes the ratio
    meaningless and falls back to the neutral factor 1 before clamping. Both
    events are counted so callers can surface them as diagnostics.
    """
    bad_d = ~(fit_d > 0.0)
    growth = np.where(bad_d, 1.0, 1.0 + fit_q / np.where(bad_d, 1.0, fit_d))
    clamped = np.clip(growth, low, high)
    return clamped, int(np.count_nonzero(bad_d | (clamped != growth)))


def _default_basis(problem: ControlProblem) -> RegressionBasis:
    return RegressionBasis(kind="markov-poly" if problem.markovian else "path-poly")


def explicit_iterate_value(
    problem: ControlProblem,
    ensemble: PathEnsemble,
    z_prev: ZRepresentation,
    phi_n: float,
    basis: RegressionBasis | None = None,
    policy: PolicyFields | None = None,
    workers: int = 1,
) -> BackwardSolution:
    """One iterate of the penalized scheme, evaluated in closed form.

    value = phi * log( sum_p w_p exp(F_p / phi) )   with weights w normalized
    to sum one, w proportional to the stochastic exponential of the frozen
    drift b(u*(z_prev)), and F the terminal functional of that policy. The
    intermediate rows y[:, j] realize the same conditional quantity at t_j by
    regressing the reweighted exponential onto the basis, in the
    variance-stable split

        y_j = c_j + m_j + phi * log1p( fit[w * expm1((fut_j - m_j)/phi)] / fit[w] )

    where c_j is the cost already accumulated before t_j, fut_j the
    cost-to-go functional, and m_j a first-stage least-squares fit of fut_j
    itself. Centering the exponent by m_j is exact for any F_t-measurable
    shift and leaves the second-stage regression a near-constant target, so
    the polynomial basis is not asked to track an exponential across the
    whole state range. y[:, N] equals F path-wise and the average of y[:, 0]
    equals value to rounding.
    """
    if phi_n < 1.0:
        raise ValidationError("phi_n must be at least 1")
    if basis is None:
        basis = _default_basis(problem)
    if policy is None:
        policy = compute_policy_fields(problem, ensemble, z_prev, workers)
    num_paths = ensemble.num_paths
    num_steps = ensemble.grid.num_steps
    step = ensemble.grid.step

    reward = problem.eval_terminal(ensemble.states)
    # Accumulated cost before each step: c[:, j] = -sum_{i<j} L_i dt.
    c = np.zeros((num_paths, num_steps + 1))
    np.cumsum(policy.cost * step, axis=1, out=c[:, 1:])
    c *= -1.0
    functional = reward + c[:, num_steps]

    # Per-step Girsanov contributions and their tail sums:
    # lw_tail[:, j] = sum_{i>=j} theta_i.dB_i - |theta_i|^2 dt / 2.
    inc = ensemble.brownian.increments
    contrib = np.einsum("pnd,pnd->pn", policy.theta, inc)
    contrib -= 0.5 * step * np.einsum("pnd,pnd->pn", policy.theta, policy.theta)
    lw_tail = np.zeros((num_paths, num_steps + 1))
    lw_tail[:, :num_steps] = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1]

    # Value and standard error from the self-normalized weighted estimator.
    lw = lw_tail[:, 0]
    ref_weights = _softmax(lw)
    delta_full = np.expm1(functional / phi_n)
    total = float(ref_weights @ delta_full)
    value = phi_n * np.log1p(total)
    spread = delta_full - total
    stderr = phi_n / (1.0 + total) * float(np.sqrt(np.sum((ref_weights * spread) ** 2)))

    y = np.empty((num_paths, num_steps + 1))
    y[:, num_steps] = functional
    clips = 0
    for j in range(num_steps - 1, -1, -1):
        fut = functional - c[:, j]
        w = np.exp(lw_tail[:, j] - lw_tail[:, j].max())
        feats = basis.features(ensemble.states[:, : j + 1], running_cost=-c[:, j])
        _, center = _fit_step(feats, fut[:, None], basis.ridge, j)
        delta = np.expm1((fut - center[:, 0]) / phi_n)
        _, fitted = _fit_step(feats, np.column_stack([w * delta, w]), basis.ridge, j)
        plus = 1.0 + delta
        low = max(float(plus.min()), np.finfo(float).tiny)
        growth, nclip = _clamped_growth(fitted[:, 0], fitted[:, 1], low, float(plus.max()))
        clips += nclip
        y[:, j] = c[:, j] + center[:, 0] + phi_n * np.log(growth)
    if clips:
        logger.warning("conditional growth floored on %d path-steps", clips)
    return BackwardSolution(y=y, z=None, value=value, stderr=stderr, positivity_clips=clips)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def estimate_Z(
    ensemble: PathEnsemble,
    y: np.ndarray,
    basis: RegressionBasis,
    clip: float,
    running_cost: np.ndarray | None = None,
) -> ZRepresentation:
    """Adjoint field by martingale-increment regression.

    Per step j the target is y[:, j+1] * dB_j / dt, regressed onto the basis
    features at t_j; the fitted field is norm-clipped at ``clip`` both here
    and at every later evaluation. ``running_cost`` optionally supplies the
    accumulated-cost feature [paths x steps] for the path-dependent basis.
    """
    num_paths, width = y.shape
    num_steps = ensemble.grid.num_steps
    if width != num_steps + 1:
        raise ValidationError("y must have one column per time node")
    inc = ensemble.brownian.increments
    step = ensemble.grid.step
    fits = []
    clip_events = 0
    for j in range(num_steps):
        targets = y[:, j + 1, None] * inc[:, j] / step
        cost_col = None if running_cost is None else running_cost[:, j]
        feats = basis.features(ensemble.states[:, : j + 1], running_cost=cost_col)
        fit, fitted = _fit_step(feats, targets, basis.ridge, j)
        _, over = _norm_clip(fitted, clip)
        clip_events += over
        fits.append(fit)
    rep = ZRepresentation(
        basis=basis,
        clip=clip,
        noise_dim=inc.shape[2],
        step_fits=fits,
        clip_events=clip_events,
    )
    if clip_events:
        logger.info("adjoint clipping active on %d path-steps", clip_events)
    return rep


def _check_apriori(worst: float, bound: float, step: int) -> None:
    """Divergence guard: the backward value may never leave 10x the a-priori
    envelope max|G| + sum of the accumulated max|H| dt."""
    if worst > 10.0 * bound:
        raise InstabilityError(
            f"backward value blew past the a-priori bound at step {step} "
            f"(|y|={worst:.3g}, bound={bound:.3g})"
        )


def solve_reference_bsde(
    problem: ControlProblem,
    ensemble: PathEnsemble,
    basis: RegressionBasis | None = None,
    picard_iters: int = 2,
) -> BackwardSolution:
    """Reference value by the dynamic-programming equation, solved backward.

    Explicit scheme: y_N = G; then per step the adjoint Z_j comes from the
    martingale-increment regression of y_{j+1} and

        y_j = fit[ y_{j+1} + H(t_j, X, Z_j) dt ]

    with H the grid-optimized Hamiltonian. ``picard_iters`` repeats the full
    backward sweep; the explicit realization is already a fixed point after
    one sweep, so later sweeps reproduce the first (verified in tests) and
    the parameter exists for interface stability.

    The divergence guard aborts when max|y_j| exceeds ten times the running
    a-priori bound max|G| + sum_{i>=j} max|H_i| dt.
    """
    if problem.controlled_vol:
        raise ValidationError("the reference equation requires an uncontrolled-volatility problem")
    if picard_iters < 1:
        raise ValidationError("picard_iters must be at least 1")
    if basis is None:
        basis = _default_basis(problem)
    num_paths = ensemble.num_paths
    num_steps = ensemble.grid.num_steps
    step = ensemble.grid.step
    times = ensemble.grid.times
    inc = ensemble.brownian.increments

    reward = problem.eval_terminal(ensemble.states)
    y = np.empty((num_paths, num_steps + 1))
    z_rep: ZRepresentation | None = None
    driver_total = np.zeros(num_paths)
    for _ in range(picard_iters):
        y[:, num_steps] = reward
        bound = np.abs(reward).max()
        driver_total[:] = 0.0
        fits = []
        clip_events = 0
        for j in range(num_steps - 1, -1, -1):
            feats = basis.features(ensemble.states[:, : j + 1])
            targets = y[:, j + 1, None] * inc[:, j] / step
            fit, fitted = _fit_step(feats, targets, basis.ridge, j)
            z_vals, over = _norm_clip(fitted, problem.z_clip)
            clip_events += over
            fits.append(fit)
            hamiltonian, _, _, _ = policy_scan(problem, times[j], ensemble.states[:, : j + 1], z_vals)
            driver_total += hamiltonian * step
            _, y_fit = _fit_step(feats, (y[:, j + 1] + hamiltonian * step)[:, None], basis.ridge, j)
            y[:, j] = y_fit[:, 0]
            bound += np.abs(hamiltonian).max() * step
            _check_apriori(float(np.abs(y[:, j]).max()), float(bound), j)
        fits.reverse()
        z_rep = ZRepresentation(
            basis=basis,
            clip=problem.z_clip,
            noise_dim=inc.shape[2],
            step_fits=fits,
            clip_events=clip_events,
        )
    value = float(y[:, 0].mean())
    accumulated = reward + driver_total
    stderr = float(accumulated.std(ddof=1) / np.sqrt(num_paths))
    return BackwardSolution(y=y, z=z_rep, value=value, stderr=stderr)
