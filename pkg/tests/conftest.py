"""Shared builders for small hand-made datasets, bases, and parameters."""
import numpy as np
import pytest

from rlhmm.core import (BasisSpec, Dataset, ModelParams, Session, StateSpace,
                        TrialRecord)


def make_session(sid, states, actions, rewards):
    trials = tuple(
        TrialRecord(t=t + 1, state=s, action=int(a), reward=float(r))
        for t, (s, a, r) in enumerate(zip(states, actions, rewards)))
    return Session(sid, trials)


def binary_dataset(states, actions, rewards):
    """Categorical two-level dataset; each argument is an (n, T) nest."""
    sessions = tuple(
        make_session(f"s{i + 1:04d}", [int(s) for s in srow], arow, rrow)
        for i, (srow, arow, rrow) in enumerate(zip(states, actions, rewards)))
    return Dataset(sessions, StateSpace("categorical", levels=2), 2,
                   len(states[0]))


def continuous_dataset(states, actions, rewards):
    """Unit-interval continuous-state dataset; arguments are (n, T) nests."""
    sessions = tuple(
        make_session(f"s{i + 1:04d}", [float(s) for s in srow], arow, rrow)
        for i, (srow, arow, rrow) in enumerate(zip(states, actions, rewards)))
    return Dataset(sessions, StateSpace("continuous", bounds=((0.0, 1.0),)),
                   2, len(states[0]))


def flat_params(T, **kw):
    """Binary-action parameters with constant transition curves."""
    defaults = dict(beta=0.1, rho=2.0, nu=(0.0,), alpha_scalar=1.0, pi1=0.7,
                    zeta0=np.full(T - 1, -1.0), zeta1=np.full(T - 1, 1.5))
    defaults.update(kw)
    return ModelParams(**defaults)


@pytest.fixture
def indicator_spec():
    return BasisSpec(kind="indicator", action_count=2, state_levels=2,
                     alpha_pattern=(1.0, 0.0, 0.0, 1.0), nu_free=(True,))


@pytest.fixture
def linear_spec():
    return BasisSpec(kind="linear", action_count=2, state_dim=1,
                     alpha_pattern=(1.0, -1.0, 0.0, 1.0), nu_free=(True,))


# one line per statistical acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
