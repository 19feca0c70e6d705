"""Scaled forward-backward inference for the two-state engaged/lapse chain.

State index 0 is the lapse state (uniform 1/D emission), index 1 the engaged
state (softmax-RL emission). The recursions run in per-trial normalized form
so nothing underflows for long sessions; the stored scale factors recover the
observed-data log-likelihood exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ._kernels import forward_backward_kernel
from .core import BasisSpec, Dataset, DomainError, ModelParams, Session
from .rl import prepare_tensors, propagate_coefficients, q_values_batch, softmax_rows

# engaged-state emission floor: keeps forward scales strictly positive when a
# softmax probability underflows during extreme line-search probes
EMISSION_FLOOR = 1e-300


@dataclass(frozen=True)
class TransitionCurve:
    """Per-trial probabilities of transitioning into the engaged state.

    c01[t] = P(U_{t+1}=1 | U_t=0) and c11[t] = P(U_{t+1}=1 | U_t=1), both
    strictly inside (0, 1); the complementary column is 1 - c by construction.
    """

    c01: np.ndarray
    c11: np.ndarray

    def __post_init__(self):
        for name in ("c01", "c11"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name),
                                                  dtype=float))
            if arr.ndim != 1 or not np.all((arr > 0.0) & (arr < 1.0)):
                raise DomainError(f"{name} entries must lie strictly in (0,1)")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.c01.shape != self.c11.shape:
            raise DomainError("c01 and c11 must have equal length")

    @classmethod
    def from_params(cls, params: ModelParams) -> "TransitionCurve":
        return cls(c01=expit(params.zeta0), c11=expit(params.zeta1))


@dataclass(frozen=True)
class PosteriorSet:
    """Smoothed posteriors for a batch of subjects.

    gamma: (n, T, 2) marginals; xi: (n, T-1, 2, 2) pairwise posteriors with
    xi[i, t, j, k] = P(U_t = j, U_{t+1} = k | data); log_lik: (n,) observed
    log-likelihoods; scale_factors: (n, T) forward normalizers.
    """

    gamma: np.ndarray
    xi: np.ndarray
    log_lik: np.ndarray
    scale_factors: np.ndarray
    subject_ids: tuple[str, ...]

    @property
    def n_subjects(self) -> int:
        return self.gamma.shape[0]

    @property
    def horizon(self) -> int:
        return self.gamma.shape[1]

    def total_log_lik(self) -> float:
        return float(self.log_lik.sum())


def emission_probabilities(params: ModelParams, spec: BasisSpec,
                           session: Session) -> np.ndarray:
    """T x 2 emission matrix: column 0 is the lapse probability 1/D, column 1
    the softmax probability of the observed action at the observed state."""
    traj = propagate_coefficients(params, spec, session)
    actions = np.asarray([rec.action for rec in session.trials])
    engaged = traj.policy[np.arange(len(session)), actions]
    out = np.empty((len(session), 2))
    out[:, 0] = 1.0 / spec.action_count
    out[:, 1] = np.maximum(engaged, EMISSION_FLOOR)
    return out


def emissions_batch(params: ModelParams, spec: BasisSpec,
                    phi_all: np.ndarray, phi_chosen: np.ndarray,
                    actions: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """(n, T, 2) emission matrix from precomputed basis tensors."""
    delta1 = params.alpha_coefficients(spec)
    qvals = q_values_batch(params.beta, delta1, phi_all, phi_chosen, rewards)
    nu_full = params.nu_full(spec.action_count)
    policy = softmax_rows(nu_full[None, None, :] + params.rho * qvals)
    chosen = np.take_along_axis(policy, actions[..., None], axis=2)[..., 0]
    out = np.empty(chosen.shape + (2,))
    out[..., 0] = 1.0 / spec.action_count
    out[..., 1] = np.maximum(chosen, EMISSION_FLOOR)
    return out


def forward_backward(emissions: np.ndarray, pi1: float,
                     curve: TransitionCurve,
                     subject_ids: tuple[str, ...] | None = None
                     ) -> PosteriorSet:
    """Run the scaled recursions; accepts (T, 2) or batched (n, T, 2) input.

    log_lik per subject equals log sum_j a_{jT} of the unscaled recursion.
    """
    eta = np.asarray(emissions, dtype=float)
    single = eta.ndim == 2
    if single:
        eta = eta[None]
    if eta.ndim != 3 or eta.shape[2] != 2:
        raise DomainError("emissions must have shape (T, 2) or (n, T, 2)")
    if np.any(eta <= 0.0) or not np.all(np.isfinite(eta)):
        raise DomainError("emission probabilities must be strictly positive")
    T = eta.shape[1]
    if curve.c01.shape[0] != T - 1:
        raise DomainError(
            f"transition curve length {curve.c01.shape[0]} != T-1 = {T - 1}")
    if not 0.0 < pi1 < 1.0:
        raise DomainError(f"pi1={pi1} outside (0, 1)")
    gamma, xi, loglik, scales = forward_backward_kernel(
        np.ascontiguousarray(eta), float(pi1), curve.c01, curve.c11)
    if subject_ids is None:
        subject_ids = tuple(str(i) for i in range(eta.shape[0]))
    return PosteriorSet(gamma=gamma, xi=xi, log_lik=loglik,
                        scale_factors=scales, subject_ids=tuple(subject_ids))


def predict_strategies(posteriors: PosteriorSet) -> np.ndarray:
    """(n, T) binary engaged indicators, thresholding gamma at 0.5 inclusive."""
    return (posteriors.gamma[:, :, 1] >= 0.5).astype(np.int8)


def write_posteriors(posteriors: PosteriorSet, path) -> None:
    """Long-format CSV: subject, trial, gamma_engaged."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "trial", "gamma_engaged"])
        for i, sid in enumerate(posteriors.subject_ids):
            for t in range(posteriors.horizon):
                writer.writerow([sid, t + 1,
                                 format(posteriors.gamma[i, t, 1], ".17g")])


def write_loglik(posteriors: PosteriorSet, path) -> None:
    """Per-subject observed log-likelihood summary CSV."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "log_lik"])
        for sid, ll in zip(posteriors.subject_ids, posteriors.log_lik):
            writer.writerow([sid, format(ll, ".17g")])


def read_posteriors(path) -> tuple[tuple[str, ...], np.ndarray]:
    """Inverse of write_posteriors: (subject_ids, gamma_engaged (n, T))."""
    per_subject: dict[str, dict[int, float]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            sid = rec["subject"]
            if sid not in per_subject:
                per_subject[sid] = {}
                order.append(sid)
            per_subject[sid][int(rec["trial"])] = float(rec["gamma_engaged"])
    if not order:
        raise DomainError("no posterior rows found")
    T = max(len(v) for v in per_subject.values())
    gamma1 = np.empty((len(order), T))
    for i, sid in enumerate(order):
        rows = per_subject[sid]
        if sorted(rows) != list(range(1, T + 1)):
            raise DomainError(f"subject {sid!r}: trials are not 1..{T}")
        gamma1[i] = [rows[t] for t in range(1, T + 1)]
    return tuple(order), gamma1
