"""Shared fixtures/builders for the test suite.

The terminal-summary hook prints one PASS/FAIL line per acceptance criterion
(collected by tests/test_acceptance.py) so the gate is visible in plain
``pytest -v`` output, where per-test stdout is otherwise captured.
"""

from __future__ import annotations

import numpy as np

from penpia.problems import ActionGrid, ControlProblem


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    try:
        from test_acceptance import ACCEPTANCE_RESULTS
    except Exception:
        return
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        status, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"C{num} {status}: {detail}")


# ---------------------------------------------------------------------------
# problem builders (local to the tests; the shipped registry lives in
# penpia.bench and is exercised separately)
# ---------------------------------------------------------------------------

def lin_drift(t, prefix, u):
    return u


def unit_vol(t, prefix, u):
    return np.ones((prefix.shape[0], 1, 1))


def zero_vol(t, prefix, u):
    return np.zeros((prefix.shape[0], 1, 1))


def quad_cost(t, prefix, u):
    return 0.5 * np.sum(u * u, axis=1)


def zero_cost(t, prefix, u):
    return np.zeros(prefix.shape[0])


def zero_drift(t, prefix, u):
    return np.zeros((prefix.shape[0], 1))


def terminal_last(paths):
    return paths[:, -1, 0]


def terminal_const(c):
    return lambda paths: np.full(paths.shape[0], float(c))


class ConstantField:
    """Constant feedback field with the per-step evaluate() interface."""

    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))

    def evaluate(self, step, prefixes, running_cost=None):
        return np.broadcast_to(self.value, (prefixes.shape[0], self.value.size))


def make_lin_problem(**kw) -> ControlProblem:
    """Scalar problem with b=u, sigma=1, L=u^2/2, G=x_T on U=[-1,1]."""
    defaults = dict(
        name="test-lin",
        horizon=1.0,
        state_dim=1,
        noise_dim=1,
        action_dim=1,
        initial_state=np.array([0.0]),
        action_set=ActionGrid.uniform([-1.0], [1.0], 0.05),
        drift=lin_drift,
        vol=unit_vol,
        running_cost=quad_cost,
        terminal_reward=terminal_last,
        drift_bound=1.0,
        vol_bound=1.0,
        z_clip=4.0,
        markovian=True,
        controlled_vol=False,
    )
    defaults.update(kw)
    return ControlProblem(**defaults)


def make_vol_problem(kappa: float = 0.5, **kw) -> ControlProblem:
    """Scalar controlled-volatility problem: b=u1, sigma=1+kappa*u2, L=|u|^2/2."""

    def vol(t, prefix, u):
        return (1.0 + kappa * u[:, 1])[:, None, None]

    def drift(t, prefix, u):
        return u[:, :1]

    defaults = dict(
        name="test-vol",
        horizon=1.0,
        state_dim=1,
        noise_dim=1,
        action_dim=2,
        initial_state=np.array([0.0]),
        action_set=ActionGrid.uniform([-1.0, -1.0], [1.0, 1.0], 0.1),
        drift=drift,
        vol=vol,
        running_cost=quad_cost,
        terminal_reward=terminal_last,
        drift_bound=1.0,
        vol_bound=1.5,
        z_clip=4.0,
        markovian=True,
        controlled_vol=True,
    )
    defaults.update(kw)
    return ControlProblem(**defaults)
