"""Penalized generalized-EM fitting: forward-backward E-step alternating
with three M-step blocks (initial probability, transition curves via a
safeguarded Newton-plus-generalized-lasso update, and the RL block via a
box-constrained quasi-Newton partial update).

Every block is decrease-or-hold on the penalized expected complete negative
log-likelihood, so the penalized observed log-likelihood is non-decreasing
across sweeps; fit() verifies that invariant and aborts loudly if broken.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from ._kernels import weighted_policy_nll
from .boxopt import BoxSpec, minimize_step
from .core import (BasisSpec, ConfigError, Dataset, ModelParams,
                   NumericalError)
from .genlasso import (PenaltySpec, WeightedDifference, null_space_projection,
                       solve_generalized_lasso)
from .hmm import (PosteriorSet, TransitionCurve, emissions_batch,
                  forward_backward)
from .rl import check_learning_rate, prepare_tensors, softmax_rows

PI_CLAMP = 1e-6
HESSIAN_FLOOR = 1e-12
RL_MARGIN = 1e-6
MONOTONE_SLACK = 1e-8
FREEZABLE = frozenset({"pi1", "zeta0", "zeta1", "rl"})


@dataclass(frozen=True)
class InitSpec:
    """Starting point and multi-start policy for EM.

    lapse_exit/engage_stay are the initial constant transition probabilities
    P(engaged next | lapse now) and P(engaged next | engaged now); extra
    starts jitter the start point with seeded noise of relative scale jitter.
    """

    beta: float = 0.1
    rho: float = 1.0
    nu_value: float = 0.0
    alpha_scalar: float = 0.5
    pi1: float = 0.7
    lapse_exit: float = 0.1
    engage_stay: float = 0.9
    n_starts: int = 3
    jitter: float = 0.3

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "beta", "rho", "nu_value", "alpha_scalar", "pi1", "lapse_exit",
            "engage_stay", "n_starts", "jitter")}

    @classmethod
    def from_dict(cls, d: dict) -> "InitSpec":
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown init keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class FitConfig:
    """Everything a fit needs besides the data and the basis."""

    penalty: PenaltySpec
    max_em_iters: int = 500
    em_tolerance: float = 1e-7
    rl_step_iters: int = 1
    zeta_step_count: int = 1
    init: InitSpec = field(default_factory=InitSpec)
    seed: int = 0
    freeze: frozenset = frozenset()

    def __post_init__(self):
        if self.max_em_iters < 1 or self.rl_step_iters < 1 \
                or self.zeta_step_count < 1:
            raise ConfigError("iteration counts must be positive")
        if not self.em_tolerance > 0:
            raise ConfigError("em_tolerance must be > 0")
        if self.init.n_starts < 1:
            raise ConfigError("n_starts must be >= 1")
        bad = set(self.freeze) - FREEZABLE
        if bad:
            raise ConfigError(f"unknown freeze blocks: {sorted(bad)}")
        object.__setattr__(self, "freeze", frozenset(self.freeze))

    def to_dict(self) -> dict:
        return {"penalty": self.penalty.to_dict(),
                "max_em_iters": self.max_em_iters,
                "em_tolerance": self.em_tolerance,
                "rl_step_iters": self.rl_step_iters,
                "zeta_step_count": self.zeta_step_count,
                "init": self.init.to_dict(),
                "seed": self.seed,
                "freeze": sorted(self.freeze)}

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {"penalty", "max_em_iters", "em_tolerance", "rl_step_iters",
                 "zeta_step_count", "init", "seed", "freeze"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown fit-config keys: {sorted(unknown)}")
        kw = dict(d)
        kw["penalty"] = PenaltySpec.from_dict(d["penalty"])
        if "init" in kw:
            kw["init"] = InitSpec.from_dict(kw["init"])
        if "freeze" in kw:
            kw["freeze"] = frozenset(kw["freeze"])
        return cls(**kw)


@dataclass(frozen=True)
class FitResult:
    """Fit output: parameters, posteriors at the optimum, and diagnostics.

    objective_trace maps 'observed' to the penalized observed log-likelihood
    after each accepted sweep (index 0 is the initial point) and 'expected'
    to the penalized negative expected complete log-likelihood after each
    sweep's M-steps, evaluated under that sweep's posteriors.
    """

    params: ModelParams
    posteriors: PosteriorSet
    objective_trace: dict
    converged: bool
    config: FitConfig
    warnings: tuple[str, ...]
    n_iters: int
    seconds: float
    model: str = "switching"
    start_index: int = 0

    @property
    def penalized_loglik(self) -> float:
        return self.objective_trace["observed"][-1]

    def to_json_dict(self) -> dict:
        return {
            "model": self.model,
            "converged": self.converged,
            "n_iters": self.n_iters,
            "seconds": self.seconds,
            "start_index": self.start_index,
            "params": self.params.to_dict(),
            "penalized_loglik": self.penalized_loglik,
            "objective_trace": {k: list(v)
                                for k, v in self.objective_trace.items()},
            "warnings": list(self.warnings),
            "config": self.config.to_dict(),
            "sweep_order": ["pi1", "zeta0", "zeta1", "rl"],
        }


# ---------------------------------------------------------------------------
# workspace: everything precomputable from (data, spec)
# ---------------------------------------------------------------------------

class _Workspace:
    def __init__(self, data: Dataset, spec: BasisSpec):
        if spec.action_count != data.action_count:
            raise ConfigError("basis and dataset disagree on action count")
        self.data = data
        self.spec = spec
        (self.states, self.actions, self.rewards,
         self.phi_all, self.phi_chosen) = prepare_tensors(spec, data)
        self.n, self.T = self.actions.shape
        self.subject_ids = tuple(data.subject_ids)
        self.max_phi2 = float((self.phi_all ** 2).sum(axis=3).max())
        self.beta_hi = min(1.0 - RL_MARGIN, (1.0 - RL_MARGIN) / self.max_phi2)
        self.pattern = np.asarray(spec.alpha_pattern, dtype=float)
        self.alpha_free = bool(np.any(self.pattern != 0.0))
        self.free_nu = [a for a in range(1, spec.action_count)
                        if spec.nu_free[a - 1]]

    def emissions(self, params: ModelParams) -> np.ndarray:
        return emissions_batch(params, self.spec, self.phi_all,
                               self.phi_chosen, self.actions, self.rewards)

    def posteriors(self, params: ModelParams,
                   eta: np.ndarray | None = None) -> PosteriorSet:
        if eta is None:
            eta = self.emissions(params)
        return forward_backward(eta, params.pi1,
                                TransitionCurve.from_params(params),
                                self.subject_ids)


# ---------------------------------------------------------------------------
# E-step and the three M-step blocks
# ---------------------------------------------------------------------------

def e_step(params: ModelParams, spec: BasisSpec,
           data: Dataset) -> PosteriorSet:
    """Per-subject emissions followed by scaled forward-backward."""
    return _Workspace(data, spec).posteriors(params)


def observed_loglik(params: ModelParams, spec: BasisSpec,
                    data: Dataset) -> np.ndarray:
    """Per-subject observed log-likelihood log sum_j a_{ijT} at params."""
    return e_step(params, spec, data).log_lik


def rl_only_loglik(params: ModelParams, spec: BasisSpec,
                   data: Dataset) -> np.ndarray:
    """Per-subject log-likelihood of the no-switching RL model (every trial
    scored by the softmax policy alone)."""
    ws = _Workspace(data, spec)
    eta = ws.emissions(params)
    return np.log(eta[:, :, 1]).sum(axis=1)


def m_step_pi(posteriors: PosteriorSet) -> float:
    """Mean of the first-trial engaged posteriors, clamped inside (0, 1)."""
    return float(np.clip(posteriors.gamma[:, 0, 1].mean(),
                         PI_CLAMP, 1.0 - PI_CLAMP))


def _zeta_objective(zeta, xi1_sum, mass_sum, lam, r) -> float:
    """Exact M-objective for one transition curve (finite part only for the
    +inf sentinel, whose iterates stay in the difference null space)."""
    smooth = float(-(xi1_sum @ zeta) + mass_sum @ np.logaddexp(0.0, zeta))
    if math.isinf(lam):
        return smooth
    return smooth + lam * float(np.abs(np.diff(zeta, n=r + 1)).sum())


def _zeta_update(posteriors: PosteriorSet, zeta_current: np.ndarray, j: int,
                 penalty: PenaltySpec,
                 admm_state: dict | None = None
                 ) -> tuple[np.ndarray, list[str]]:
    lam = penalty.lam(j)
    r = penalty.r
    xi1_sum = posteriors.xi[:, :, j, 1].sum(axis=0)
    mass_sum = posteriors.xi[:, :, j, :].sum(axis=(0, 2))
    warnings: list[str] = []

    current_obj = _zeta_objective(zeta_current, xi1_sum, mass_sum, lam, r)
    if math.isinf(lam) and float(
            np.abs(np.diff(zeta_current, n=r + 1)).sum()) > 1e-9:
        current_obj = math.inf  # current point is infeasible for +inf

    c = expit(zeta_current)
    g0 = -xi1_sum + mass_sum * c
    h0 = mass_sum * c * (1.0 - c)
    if h0.min() < HESSIAN_FLOOR:
        h0 = np.maximum(h0, HESSIAN_FLOOR)
        warnings.append(f"zeta{j}: Hessian floor applied at "
                        f"{int((h0 == HESSIAN_FLOOR).sum())} trials")
    h_sqrt = np.sqrt(h0)
    w = 1.0 / h_sqrt
    op = WeightedDifference(r, w)

    damping = 1.0
    for _ in range(21):  # full step plus up to 20 halvings
        y = h_sqrt * zeta_current - w * (damping * g0)
        if math.isinf(lam):
            zt = null_space_projection(y, op)
        else:
            zt = solve_generalized_lasso(y, op, lam, state=admm_state)
        candidate = w * zt
        cand_obj = _zeta_objective(candidate, xi1_sum, mass_sum, lam, r)
        if cand_obj <= current_obj:
            return candidate, warnings
        damping *= 0.5
    warnings.append(f"zeta{j}: safeguard exhausted, step rejected")
    return zeta_current.copy(), warnings


def m_step_zeta(posteriors: PosteriorSet, zeta_current: np.ndarray, j: int,
                penalty: PenaltySpec) -> np.ndarray:
    """One safeguarded Newton-plus-generalized-lasso update of zeta_j."""
    out, _ = _zeta_update(posteriors, np.asarray(zeta_current, dtype=float),
                          j, penalty)
    return out


def _rl_update(ws: _Workspace, posteriors: PosteriorSet, params: ModelParams,
               iters: int) -> tuple[ModelParams, list[str]]:
    weights = np.ascontiguousarray(posteriors.gamma[:, :, 1])
    if weights.sum() == 0.0:
        return params, ["rl: skipped, no engaged posterior mass"]

    D = ws.spec.action_count
    free_nu = ws.free_nu
    x0 = [params.beta, params.rho]
    lower = [RL_MARGIN, RL_MARGIN]
    upper = [ws.beta_hi, math.inf]
    for a in free_nu:
        x0.append(params.nu[a - 1])
        lower.append(-math.inf)
        upper.append(math.inf)
    if ws.alpha_free:
        x0.append(params.alpha_scalar)
        lower.append(-math.inf)
        upper.append(math.inf)
    box = BoxSpec(np.asarray(lower), np.asarray(upper))
    # previous sweeps may have landed exactly on a bound; nudge inside, as
    # the minimizer requires a strictly interior start
    x0 = np.asarray(x0, dtype=float)
    lo, hi = np.asarray(lower), np.asarray(upper)
    shift = 1e-12 * np.maximum(1.0, np.abs(x0))
    x0 = np.where(np.isfinite(lo), np.maximum(x0, lo + shift), x0)
    x0 = np.where(np.isfinite(hi), np.minimum(x0, hi - shift), x0)
    base_nu = np.zeros(D)
    fixed_alpha = params.alpha_scalar if not ws.alpha_free else 0.0

    def unpack(x):
        beta, rho = x[0], x[1]
        nu_full = base_nu.copy()
        for idx, a in enumerate(free_nu):
            nu_full[a] = x[2 + idx]
        alpha = x[-1] if ws.alpha_free else fixed_alpha
        return beta, rho, nu_full, (alpha / rho) * ws.pattern

    def objective(x):
        beta, rho, nu_full, delta1 = unpack(x)
        return weighted_policy_nll(ws.phi_all, ws.phi_chosen, ws.actions,
                                   ws.rewards, weights, beta, rho, nu_full,
                                   delta1)

    res = minimize_step(objective, x0, box, max_iters=iters,
                        final_grad=False)
    beta, rho, nu_full, _ = unpack(res.x)
    nu = tuple(nu_full[1:])
    alpha = float(res.x[-1]) if ws.alpha_free else fixed_alpha
    return params.replace(beta=float(beta), rho=float(rho), nu=nu,
                          alpha_scalar=alpha), []


def m_step_rl(posteriors: PosteriorSet, params: ModelParams, spec: BasisSpec,
              data: Dataset, iters: int) -> tuple:
    """Partial minimization of the engaged-weighted policy objective;
    returns the updated (beta, rho, nu, alpha_scalar)."""
    new, _ = _rl_update(_Workspace(data, spec), posteriors, params, iters)
    return new.beta, new.rho, new.nu, new.alpha_scalar


# ---------------------------------------------------------------------------
# full EM loop
# ---------------------------------------------------------------------------

def _expected_penalized(posteriors: PosteriorSet, params: ModelParams,
                        eta: np.ndarray, penalty: PenaltySpec) -> float:
    """Penalized negative expected complete log-likelihood J_lambda(theta)
    under the supplied posteriors."""
    gamma, xi = posteriors.gamma, posteriors.xi
    init = float(gamma[:, 0, 0].sum() * math.log1p(-params.pi1)
                 + gamma[:, 0, 1].sum() * math.log(params.pi1))
    trans = 0.0
    for j, zeta in ((0, params.zeta0), (1, params.zeta1)):
        log_c1 = -np.logaddexp(0.0, -zeta)
        log_c0 = -np.logaddexp(0.0, zeta)
        trans += float(xi[:, :, j, 1].sum(axis=0) @ log_c1
                       + xi[:, :, j, 0].sum(axis=0) @ log_c0)
    emit = float((gamma * np.log(eta)).sum())
    return -(init + trans + emit) \
        + penalty.penalty_value(params.zeta0, params.zeta1)


def _project_inf_curves(params: ModelParams,
                        penalty: PenaltySpec) -> ModelParams:
    """Force curves carrying a +inf penalty into the operator's null space
    so the sentinel objective is finite from the first sweep."""
    updates = {}
    ones = None
    for name, lam in (("zeta0", penalty.lambda0), ("zeta1", penalty.lambda1)):
        if math.isinf(lam):
            zeta = getattr(params, name)
            if ones is None or ones.weights.shape[0] != zeta.shape[0]:
                ones = WeightedDifference(penalty.r, np.ones(zeta.shape[0]))
            updates[name] = null_space_projection(zeta, ones)
    return params.replace(**updates) if updates else params


def _fit_single(ws: _Workspace, config: FitConfig, params: ModelParams):
    penalty = config.penalty
    params = _project_inf_curves(params, penalty)
    eta = ws.emissions(params)
    posts = ws.posteriors(params, eta)
    pen_ll = posts.total_log_lik() \
        - penalty.penalty_value(params.zeta0, params.zeta1)
    observed = [pen_ll]
    expected = []
    warnings: list[str] = []
    converged = False
    n_iters = 0

    admm_states = ({}, {})  # split/dual pairs carried across sweeps
    for _ in range(config.max_em_iters):
        if "pi1" not in config.freeze:
            params = params.replace(pi1=m_step_pi(posts))
        for j, name in ((0, "zeta0"), (1, "zeta1")):
            if name in config.freeze:
                continue
            zeta = getattr(params, name)
            for _ in range(config.zeta_step_count):
                zeta, warn = _zeta_update(posts, zeta, j, penalty,
                                          admm_states[j])
                warnings.extend(warn)
            params = params.replace(**{name: zeta})
        if "rl" not in config.freeze:
            params, warn = _rl_update(ws, posts, params,
                                      config.rl_step_iters)
            warnings.extend(warn)

        eta = ws.emissions(params)
        expected.append(_expected_penalized(posts, params, eta, penalty))
        posts = ws.posteriors(params, eta)
        new_pen_ll = posts.total_log_lik() \
            - penalty.penalty_value(params.zeta0, params.zeta1)
        observed.append(new_pen_ll)
        n_iters += 1
        if new_pen_ll < pen_ll - MONOTONE_SLACK:
            raise NumericalError(
                f"penalized observed log-likelihood decreased at sweep "
                f"{n_iters}: {pen_ll:.10f} -> {new_pen_ll:.10f}; "
                f"trace: {[round(v, 6) for v in observed]}")
        if abs(new_pen_ll - pen_ll) <= config.em_tolerance \
                * (1.0 + abs(pen_ll)):
            pen_ll = new_pen_ll
            converged = True
            break
        pen_ll = new_pen_ll

    # flat-direction diagnostic: when both states emit the same probability
    # on every trial, pi1 and the transition curves cannot move off their
    # starting values and should not be read as estimates
    if np.all(np.abs(eta[:, :, 1] - eta[:, :, 0]) <= 1e-6 * eta[:, :, 0]):
        warnings.append("emissions identical across states: pi1 and the "
                        "transition curves are unidentified and keep their "
                        "starting values")

    return params, posts, observed, expected, converged, warnings, n_iters


def _start_points(ws: _Workspace, config: FitConfig) -> list[ModelParams]:
    init = config.init
    T = ws.T
    nu = tuple(init.nu_value if ws.spec.nu_free[a - 1] else 0.0
               for a in range(1, ws.spec.action_count))
    base = ModelParams(
        beta=min(init.beta, 0.999 * ws.beta_hi),
        rho=init.rho, nu=nu,
        alpha_scalar=init.alpha_scalar if ws.alpha_free else 0.0,
        pi1=init.pi1,
        zeta0=np.full(T - 1, logit(init.lapse_exit)),
        zeta1=np.full(T - 1, logit(init.engage_stay)))
    starts = [base]
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    for _ in range(1, init.n_starts):
        jit = init.jitter
        beta = float(np.clip(base.beta * math.exp(rng.normal(0.0, jit)),
                             2.0 * RL_MARGIN, 0.95 * ws.beta_hi))
        rho = float(base.rho * math.exp(rng.normal(0.0, jit)))
        alpha = float(base.alpha_scalar + rng.normal(0.0, jit))
        pi1 = float(expit(logit(base.pi1) + rng.normal(0.0, jit)))
        z0 = base.zeta0 + rng.normal(0.0, jit)
        z1 = base.zeta1 + rng.normal(0.0, jit)
        nu_k = tuple(v + rng.normal(0.0, jit) if ws.spec.nu_free[a]
                     else 0.0 for a, v in enumerate(base.nu))
        starts.append(ModelParams(
            beta=beta, rho=max(rho, 2.0 * RL_MARGIN), nu=nu_k,
            alpha_scalar=alpha if ws.alpha_free else 0.0,
            pi1=min(max(pi1, PI_CLAMP), 1.0 - PI_CLAMP),
            zeta0=z0, zeta1=z1))
    return starts


def fit(data: Dataset, spec: BasisSpec, config: FitConfig) -> FitResult:
    """Fit the switching model by penalized generalized EM.

    Deterministic given (data, spec, config): multi-start jitter derives from
    config.seed and everything else is exact arithmetic.
    """
    t0 = time.perf_counter()
    ws = _Workspace(data, spec)
    config.penalty.operator(ws.T - 1)  # validates T against the order
    check_learning_rate(config.init.beta, spec, states=ws.states)

    best = None
    for k, start in enumerate(_start_points(ws, config)):
        outcome = _fit_single(ws, config, start)
        if best is None or outcome[2][-1] > best[1][2][-1]:
            best = (k, outcome)
    k, (params, posts, observed, expected, converged, warns, iters) = best
    return FitResult(params=params, posteriors=posts,
                     objective_trace={"observed": tuple(observed),
                                      "expected": tuple(expected)},
                     converged=converged, config=config,
                     warnings=tuple(warns), n_iters=iters,
                     seconds=time.perf_counter() - t0,
                     model="switching", start_index=k)


def fit_warm(data: Dataset, spec: BasisSpec, config: FitConfig,
             start: ModelParams) -> FitResult:
    """Single EM run started at the supplied parameters (no multi-start).

    Used for bootstrap replicates and penalty-path continuation, where a
    nearby solution is already known.
    """
    t0 = time.perf_counter()
    ws = _Workspace(data, spec)
    config.penalty.operator(ws.T - 1)
    # the resample can raise max phi'phi above the original data's, so pull
    # the warm-start rate inside the new feasible box instead of rejecting
    if start.beta >= ws.beta_hi:
        start = start.replace(beta=0.999 * ws.beta_hi)
    params, posts, observed, expected, converged, warns, iters = \
        _fit_single(ws, config, start)
    return FitResult(params=params, posteriors=posts,
                     objective_trace={"observed": tuple(observed),
                                      "expected": tuple(expected)},
                     converged=converged, config=config,
                     warnings=tuple(warns), n_iters=iters,
                     seconds=time.perf_counter() - t0,
                     model="switching", start_index=0)


def fit_rl_only(data: Dataset, spec: BasisSpec, config: FitConfig,
                max_opt_iters: int = 500) -> FitResult:
    """Fit the no-switching comparator: the engaged posterior is pinned to 1
    and the policy objective is minimized to convergence in one call."""
    t0 = time.perf_counter()
    ws = _Workspace(data, spec)
    check_learning_rate(config.init.beta, spec, states=ws.states)
    start = _start_points(ws, config)[0]
    gamma = np.zeros((ws.n, ws.T, 2))
    gamma[:, :, 1] = 1.0
    xi = np.zeros((ws.n, ws.T - 1, 2, 2))
    xi[:, :, 1, 1] = 1.0
    pinned = PosteriorSet(gamma=gamma, xi=xi, log_lik=np.zeros(ws.n),
                          scale_factors=np.ones((ws.n, ws.T)),
                          subject_ids=ws.subject_ids)
    params, _ = _rl_update(ws, pinned, start, max_opt_iters)
    high = logit(1.0 - PI_CLAMP)
    params = params.replace(pi1=1.0 - PI_CLAMP,
                            zeta0=np.full(ws.T - 1, high),
                            zeta1=np.full(ws.T - 1, high))
    eta = ws.emissions(params)
    log_lik = np.log(eta[:, :, 1]).sum(axis=1)
    posts = PosteriorSet(gamma=gamma, xi=xi, log_lik=log_lik,
                         scale_factors=eta[:, :, 1].copy(),
                         subject_ids=ws.subject_ids)
    total = float(log_lik.sum())
    return FitResult(params=params, posteriors=posts,
                     objective_trace={"observed": (total,), "expected": ()},
                     converged=True, config=config, warnings=(),
                     n_iters=1, seconds=time.perf_counter() - t0,
                     model="rl_only", start_index=0)
