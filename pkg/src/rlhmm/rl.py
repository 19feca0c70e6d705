"""Deterministic forward simulation of the learner's coefficient trajectory
and the softmax action probabilities along a session.

The coefficient update (prediction-error learning at rate beta) depends only
on the observed (state, action, reward) sequence, never on the hidden
strategy, so a session's trajectory is a pure function of the parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import propagate_deltas, propagate_q_batch
from .core import (BasisSpec, ConfigError, DomainError, ModelParams, Session,
                   basis_tensor, pack_arrays)


@dataclass(frozen=True)
class QTrajectory:
    """Per-session learner state: coefficients, Q values, and the policy.

    deltas has T+1 rows (delta^1 .. delta^{T+1}); q_values[t, a] is the
    expected reward phi(a, s_t)' delta^t at the trial's observed state;
    policy rows are the softmax probabilities over actions.
    """

    deltas: np.ndarray
    q_values: np.ndarray
    policy: np.ndarray


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, max-subtracted so large
    magnitudes (|logit| up to ~1e3 during line searches) cannot overflow."""
    m = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - m)
    return ex / ex.sum(axis=-1, keepdims=True)


def action_probabilities(params: ModelParams, q_row: np.ndarray) -> np.ndarray:
    """Softmax policy over nu_a + rho * Q(a) for one Q row (nu_0 = 0)."""
    q_row = np.asarray(q_row, dtype=float)
    if not np.all(np.isfinite(q_row)):
        raise DomainError("q_row must be finite")
    nu_full = params.nu_full(q_row.shape[-1])
    return softmax_rows(nu_full + params.rho * q_row)


def max_effective_rate(beta: float, spec: BasisSpec,
                       states: np.ndarray | None = None,
                       bounds=None) -> float:
    """Largest per-trial learning rate beta * phi' phi the data can produce."""
    return beta * spec.max_phi_norm_sq(states=states, bounds=bounds)


def check_learning_rate(beta: float, spec: BasisSpec,
                        states: np.ndarray | None = None,
                        bounds=None) -> None:
    """Reject configurations where beta * max phi' phi >= 1.

    The weighted-sum form of the Q update needs the effective rate in (0, 1);
    violations are rejected up front rather than clipped mid-run.
    """
    rate = max_effective_rate(beta, spec, states=states, bounds=bounds)
    if not 0.0 < rate < 1.0:
        raise ConfigError(
            f"effective learning rate beta * max(phi'phi) = {rate:.6g} "
            f"is outside (0, 1); lower beta or rescale the basis")


def propagate_coefficients(params: ModelParams, spec: BasisSpec,
                           session: Session) -> QTrajectory:
    """Run the coefficient recursion over one session and evaluate the
    Q values and softmax policy at each trial's observed state."""
    states = np.asarray([rec.state for rec in session.trials], dtype=float)
    states = states.reshape(1, len(session), -1)
    if states.shape[-1] == 1:
        states = states[..., 0]
    actions = np.asarray([[rec.action for rec in session.trials]],
                         dtype=np.int64)
    rewards = np.asarray([[rec.reward for rec in session.trials]],
                         dtype=float)
    check_learning_rate(params.beta, spec, states=states)

    phi_all = basis_tensor(spec, states)
    phi_chosen = np.take_along_axis(
        phi_all, actions[..., None, None], axis=2)[:, :, 0, :]
    delta1 = params.alpha_coefficients(spec)
    deltas = propagate_deltas(np.ascontiguousarray(phi_chosen[0]),
                              np.ascontiguousarray(rewards[0]),
                              delta1, params.beta)
    q_values = propagate_q_batch(np.ascontiguousarray(phi_all),
                                 np.ascontiguousarray(phi_chosen),
                                 rewards, delta1, params.beta)[0]
    nu_full = params.nu_full(spec.action_count)
    policy = softmax_rows(nu_full[None, :] + params.rho * q_values)
    return QTrajectory(deltas=deltas, q_values=q_values, policy=policy)


def q_values_batch(beta: float, delta1: np.ndarray, phi_all: np.ndarray,
                   phi_chosen: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """Batch Q values (n, T, D) from precomputed basis tensors."""
    return propagate_q_batch(phi_all, phi_chosen, rewards, delta1, beta)


def prepare_tensors(spec: BasisSpec, dataset) -> tuple[np.ndarray, ...]:
    """(states, actions, rewards, phi_all, phi_chosen) for a whole dataset."""
    states, actions, rewards = pack_arrays(dataset)
    phi_all = basis_tensor(spec, states)
    phi_chosen = np.ascontiguousarray(
        np.take_along_axis(phi_all, actions[..., None, None],
                           axis=2)[:, :, 0, :])
    return states, actions, rewards, np.ascontiguousarray(phi_all), phi_chosen
