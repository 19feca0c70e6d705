"""Domain types, dataset container, basis-function evaluation, and validation.

Everything here is immutable after construction and safe to share across
threads. The CSV/JSON reader and writer functions at the bottom define the
on-disk dataset format used by the CLI.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DomainError(ValueError):
    """A value is outside the declared domain (action, state, reward, ...)."""


class IngestionError(ValueError):
    """A dataset file failed validation; the message names the offending row."""


class ConfigError(ValueError):
    """An invalid configuration (model setup, CLI config, window spec, ...)."""


class NumericalError(RuntimeError):
    """A numerical routine failed to reach its accuracy contract."""


STATE_KINDS = ("categorical", "continuous")
BASIS_KINDS = ("indicator", "linear", "bspline")


# ---------------------------------------------------------------------------
# state space / trial containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StateSpace:
    """Declaration of the (bounded) state space shared by all sessions.

    kind="categorical": states are integer codes 0..levels-1 (dim must be 1).
    kind="continuous":  states are real vectors of length dim, with per-
    coordinate closed bounds.
    """

    kind: str
    levels: int | None = None
    bounds: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.kind not in STATE_KINDS:
            raise ConfigError(f"unknown state kind {self.kind!r}")
        if self.kind == "categorical":
            if self.levels is None or self.levels < 1:
                raise ConfigError("categorical state space needs levels >= 1")
        else:
            if not self.bounds:
                raise ConfigError("continuous state space needs bounds")
            for lo, hi in self.bounds:
                if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                    raise ConfigError(f"invalid state bounds ({lo}, {hi})")

    @property
    def dim(self) -> int:
        return 1 if self.kind == "categorical" else len(self.bounds)

    def contains(self, state) -> bool:
        if self.kind == "categorical":
            s = int(state)
            return float(state) == s and 0 <= s < self.levels
        vec = np.atleast_1d(np.asarray(state, dtype=float))
        if vec.shape != (self.dim,) or not np.all(np.isfinite(vec)):
            return False
        return all(lo <= v <= hi for v, (lo, hi) in zip(vec, self.bounds))


@dataclass(frozen=True)
class TrialRecord:
    """One (state, action, reward) observation; ``t`` is the 1-based index."""

    t: int
    state: float | tuple[float, ...]
    action: int
    reward: float


@dataclass(frozen=True)
class Session:
    """One subject's ordered trial sequence; the unit of resampling."""

    subject_id: str
    trials: tuple[TrialRecord, ...]

    def __post_init__(self):
        for want, rec in enumerate(self.trials, start=1):
            if rec.t != want:
                raise DomainError(
                    f"session {self.subject_id!r}: trial indices must be 1..T "
                    f"with no gaps (got t={rec.t} at position {want})")

    def __len__(self) -> int:
        return len(self.trials)


@dataclass(frozen=True)
class Dataset:
    """All sessions sharing one state space, action count, and horizon."""

    sessions: tuple[Session, ...]
    state_space: StateSpace
    action_count: int
    horizon: int
    r_max: float = 1.0

    def __post_init__(self):
        if self.action_count < 2:
            raise ConfigError("action_count must be >= 2")
        if not self.sessions:
            raise ConfigError("dataset needs at least one session")
        for sess in self.sessions:
            if len(sess) != self.horizon:
                raise DomainError(
                    f"session {sess.subject_id!r} has {len(sess)} trials, "
                    f"expected horizon {self.horizon} (ragged horizons are "
                    f"rejected; truncate or pad upstream)")
            for rec in sess.trials:
                if not 0 <= rec.action < self.action_count:
                    raise DomainError(
                        f"session {sess.subject_id!r} trial {rec.t}: action "
                        f"{rec.action} outside 0..{self.action_count - 1}")
                if not (0.0 <= rec.reward <= self.r_max):
                    raise DomainError(
                        f"session {sess.subject_id!r} trial {rec.t}: reward "
                        f"{rec.reward} outside [0, {self.r_max}]")
                if not self.state_space.contains(rec.state):
                    raise DomainError(
                        f"session {sess.subject_id!r} trial {rec.t}: state "
                        f"{rec.state!r} outside the declared state space")

    @property
    def n_subjects(self) -> int:
        return len(self.sessions)

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.sessions]

    def subset(self, indices) -> "Dataset":
        """New dataset holding sessions[i] for i in indices (repeats allowed).

        Resampled duplicates get a '#k' suffix so subject ids stay unique.
        """
        seen: dict[str, int] = {}
        out = []
        for i in indices:
            sess = self.sessions[int(i)]
            k = seen.get(sess.subject_id, 0)
            seen[sess.subject_id] = k + 1
            sid = sess.subject_id if k == 0 else f"{sess.subject_id}#{k}"
            out.append(Session(sid, sess.trials) if k else sess)
        return Dataset(tuple(out), self.state_space, self.action_count,
                       self.horizon, self.r_max)


def pack_arrays(dataset: Dataset):
    """Column-major views of a dataset: (states, actions, rewards).

    states is (n, T) for scalar/categorical state spaces and (n, T, d) for
    vector ones; actions is int64 (n, T); rewards float64 (n, T).
    """
    n, T = dataset.n_subjects, dataset.horizon
    d = dataset.state_space.dim
    actions = np.empty((n, T), dtype=np.int64)
    rewards = np.empty((n, T), dtype=np.float64)
    states = np.empty((n, T) if d == 1 else (n, T, d), dtype=np.float64)
    for i, sess in enumerate(dataset.sessions):
        for j, rec in enumerate(sess.trials):
            actions[i, j] = rec.action
            rewards[i, j] = rec.reward
            states[i, j] = rec.state
    return states, actions, rewards


# ---------------------------------------------------------------------------
# basis specification and evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BasisSpec:
    """Feature map phi(a, s) plus the structured initial-coefficient pattern.

    kind="indicator": one indicator per (action, state-level) cell, flat
        index s * D + a, so for D=2 and two levels the layout is
        (a0s0, a1s0, a0s1, a1s1).
    kind="linear":    per-action block (1, s_1, ..., s_d).
    kind="bspline":   per-action block of B-spline basis values of the given
        degree on the given knot vector (scalar states only).

    alpha_pattern is the fixed vector v with initial coefficients
    (alpha_scalar / rho) * v. nu_free[a-1] says whether the intercept of
    action a is estimated (the action-0 intercept is always pinned to 0).
    """

    kind: str
    action_count: int
    state_levels: int | None = None
    state_dim: int = 1
    knots: tuple[float, ...] | None = None
    degree: int = 3
    alpha_pattern: tuple[float, ...] = ()
    nu_free: tuple[bool, ...] = ()

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ConfigError(f"unknown basis kind {self.kind!r}")
        if self.action_count < 2:
            raise ConfigError("action_count must be >= 2")
        if self.kind == "indicator" and (self.state_levels or 0) < 1:
            raise ConfigError("indicator basis needs state_levels >= 1")
        if self.kind == "bspline":
            if self.state_dim != 1:
                raise ConfigError("bspline basis supports scalar states only")
            if self.knots is None or len(self.knots) < 2 * (self.degree + 1):
                raise ConfigError("bspline basis needs a full knot vector "
                                  "(>= 2*(degree+1) knots)")
        if not self.nu_free:
            object.__setattr__(self, "nu_free",
                               (True,) * (self.action_count - 1))
        if len(self.nu_free) != self.action_count - 1:
            raise ConfigError("nu_free must have length action_count - 1")
        if not self.alpha_pattern:
            object.__setattr__(self, "alpha_pattern", (0.0,) * self.dimension)
        if len(self.alpha_pattern) != self.dimension:
            raise ConfigError(
                f"alpha_pattern has length {len(self.alpha_pattern)}, "
                f"basis dimension is {self.dimension}")

    @property
    def per_action_width(self) -> int:
        if self.kind == "indicator":
            return self.state_levels
        if self.kind == "linear":
            return 1 + self.state_dim
        return len(self.knots) - self.degree - 1

    @property
    def dimension(self) -> int:
        """Feature length p."""
        return self.action_count * self.per_action_width

    def state_features(self, states: np.ndarray) -> np.ndarray:
        """psi(s) for a batch of states; shape (m, per_action_width)."""
        if self.kind == "indicator":
            codes = np.asarray(states)
            if not np.array_equal(codes, codes.astype(np.int64)):
                raise DomainError("indicator basis needs integer state codes")
            codes = codes.astype(np.int64).reshape(-1)
            if codes.min(initial=0) < 0 or codes.max(initial=0) >= self.state_levels:
                raise DomainError(
                    f"state code outside 0..{self.state_levels - 1}")
            out = np.zeros((codes.size, self.state_levels))
            out[np.arange(codes.size), codes] = 1.0
            return out
        if self.kind == "linear":
            vals = np.asarray(states, dtype=float)
            vals = vals.reshape(-1, self.state_dim)
            return np.hstack([np.ones((vals.shape[0], 1)), vals])
        from scipy.interpolate import BSpline
        x = np.asarray(states, dtype=float).reshape(-1)
        t = np.asarray(self.knots)
        x = np.clip(x, t[self.degree], t[len(t) - self.degree - 1])
        return BSpline.design_matrix(x, t, self.degree,
                                     extrapolate=False).toarray()

    def max_phi_norm_sq(self, states: np.ndarray | None = None,
                        bounds=None) -> float:
        """sup of phi' phi, over observed states or the declared bounds.

        Used by the learning-rate guard: the effective per-trial rate is
        beta * phi' phi and must stay below 1.
        """
        if self.kind == "indicator":
            return 1.0
        if self.kind == "bspline":
            # partition of unity: sum_k B_k = 1 so sum_k B_k^2 <= 1
            return 1.0
        if states is not None:
            vals = np.asarray(states, dtype=float).reshape(-1, self.state_dim)
            return float(1.0 + (vals ** 2).sum(axis=1).max())
        if bounds is None:
            raise ConfigError("need observed states or bounds for the guard")
        return 1.0 + sum(max(lo * lo, hi * hi) for lo, hi in bounds)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "action_count": self.action_count,
            "state_levels": self.state_levels, "state_dim": self.state_dim,
            "knots": list(self.knots) if self.knots is not None else None,
            "degree": self.degree, "alpha_pattern": list(self.alpha_pattern),
            "nu_free": list(self.nu_free),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        unknown = set(d) - {"kind", "action_count", "state_levels",
                            "state_dim", "knots", "degree", "alpha_pattern",
                            "nu_free"}
        if unknown:
            raise ConfigError(f"unknown basis keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("knots", "alpha_pattern", "nu_free"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def evaluate_basis(spec: BasisSpec, action: int, state) -> np.ndarray:
    """phi(a, s) as a length-p vector. Pure and deterministic."""
    if not 0 <= action < spec.action_count:
        raise DomainError(
            f"action {action} outside 0..{spec.action_count - 1}")
    if spec.kind == "indicator":
        psi = spec.state_features(np.asarray([state]))[0]
        # flat index s*D + a: interleave actions within each state level
        out = np.zeros(spec.dimension)
        level = int(np.argmax(psi))
        out[level * spec.action_count + action] = 1.0
        return out
    psi = spec.state_features(np.asarray([state]))[0]
    out = np.zeros(spec.dimension)
    w = spec.per_action_width
    out[action * w:(action + 1) * w] = psi
    return out


def basis_tensor(spec: BasisSpec, states: np.ndarray) -> np.ndarray:
    """phi(a, s_it) for every trial and action; shape (n, T, D, p)."""
    n, T = states.shape[:2]
    psi = spec.state_features(states.reshape(n * T, -1))
    w = spec.per_action_width
    D, p = spec.action_count, spec.dimension
    out = np.zeros((n * T, D, p))
    if spec.kind == "indicator":
        levels = np.argmax(psi, axis=1)
        rows = np.arange(n * T)
        for a in range(D):
            out[rows, a, levels * D + a] = 1.0
    else:
        for a in range(D):
            out[:, a, a * w:(a + 1) * w] = psi
    return out.reshape(n, T, D, p)


def make_bspline_knots(states: np.ndarray, n_basis: int,
                       degree: int = 3) -> tuple[float, ...]:
    """Clamped knot vector with interior knots at equally spaced quantiles."""
    x = np.asarray(states, dtype=float).reshape(-1)
    n_interior = n_basis - degree - 1
    if n_interior < 0:
        raise ConfigError("n_basis too small for the requested degree")
    qs = np.linspace(0, 1, n_interior + 2)[1:-1]
    interior = np.quantile(x, qs) if n_interior else np.empty(0)
    lo, hi = float(x.min()), float(x.max())
    return tuple(np.concatenate([[lo] * (degree + 1), interior,
                                 [hi] * (degree + 1)]))


# ---------------------------------------------------------------------------
# model parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full parameter vector: learner, policy, and switching-chain pieces.

    beta: learning rate in (0, 1); rho: reward sensitivity; nu: policy
    intercepts for actions 1..D-1 (action 0 pinned to 0); alpha_scalar:
    magnitude of the structured initial coefficients; pi1: probability of
    starting engaged; zeta0/zeta1: length T-1 transition logits (entry t
    governs the t -> t+1 transition out of the lapse / engaged state).
    """

    beta: float
    rho: float
    nu: tuple[float, ...]
    alpha_scalar: float
    pi1: float
    zeta0: np.ndarray
    zeta1: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise DomainError(f"beta={self.beta} outside (0, 1)")
        if self.rho < 0.0:
            raise DomainError(f"rho={self.rho} must be >= 0")
        if not 0.0 < self.pi1 < 1.0:
            raise DomainError(f"pi1={self.pi1} outside (0, 1)")
        for name in ("zeta0", "zeta1"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name),
                                                  dtype=float))
            if arr.ndim != 1 or not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} must be a finite 1-d vector")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "nu", tuple(float(v) for v in self.nu))

    def alpha_coefficients(self, spec: BasisSpec) -> np.ndarray:
        """Initial coefficient vector (alpha_scalar / rho) * pattern."""
        if self.rho == 0.0:
            if self.alpha_scalar != 0.0:
                raise DomainError("rho=0 requires alpha_scalar=0")
            return np.zeros(spec.dimension)
        return (self.alpha_scalar / self.rho) * np.asarray(spec.alpha_pattern)

    def nu_full(self, action_count: int) -> np.ndarray:
        """(0, nu_1, ..., nu_{D-1}) as an array."""
        if len(self.nu) != action_count - 1:
            raise DomainError(f"nu has length {len(self.nu)}, "
                              f"expected {action_count - 1}")
        return np.concatenate([[0.0], self.nu])

    def to_dict(self) -> dict:
        return {
            "beta": self.beta, "rho": self.rho, "nu": list(self.nu),
            "alpha_scalar": self.alpha_scalar, "pi1": self.pi1,
            "zeta0": self.zeta0.tolist(), "zeta1": self.zeta1.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(beta=d["beta"], rho=d["rho"], nu=tuple(d["nu"]),
                   alpha_scalar=d["alpha_scalar"], pi1=d["pi1"],
                   zeta0=np.asarray(d["zeta0"]), zeta1=np.asarray(d["zeta1"]))

    def replace(self, **kw) -> "ModelParams":
        d = self.to_dict()
        d.update({k: v for k, v in kw.items()})
        return ModelParams.from_dict(d)


# ---------------------------------------------------------------------------
# dataset file format
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSchema:
    """Ingestion config mirroring the JSON metadata sidecar."""

    action_count: int
    state_kind: str
    state_bounds: object  # int levels, or [[lo, hi], ...]
    horizon: int | None = None
    r_max: float = 1.0

    def state_space(self) -> StateSpace:
        if self.state_kind == "categorical":
            return StateSpace("categorical", levels=int(self.state_bounds))
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.state_bounds)
        return StateSpace("continuous", bounds=bounds)

    def to_dict(self) -> dict:
        return {"action_count": self.action_count,
                "state_kind": self.state_kind,
                "state_bounds": self.state_bounds,
                "horizon": self.horizon,
                "r_max": self.r_max}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        known = {"action_count", "state_kind", "state_bounds", "horizon",
                 "r_max"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown schema keys: {sorted(unknown)}")
        return cls(action_count=int(d["action_count"]),
                   state_kind=d["state_kind"],
                   state_bounds=d["state_bounds"],
                   horizon=None if d.get("horizon") is None else int(d["horizon"]),
                   r_max=float(d.get("r_max", 1.0)))


def read_schema(path) -> DatasetSchema:
    with open(path, "r", encoding="utf-8") as fh:
        return DatasetSchema.from_dict(json.load(fh))


def write_schema(schema: DatasetSchema, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(schema.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise IngestionError(f"row {row}: column {col!r} is not numeric: "
                             f"{text!r}") from None
    if not math.isfinite(val):
        raise IngestionError(f"row {row}: column {col!r} is not finite")
    return val


def load_dataset(path, schema: DatasetSchema) -> Dataset:
    """Parse a session CSV under the given schema into a validated Dataset.

    Rows may appear in any order but each subject's trial indices must be a
    permutation of 1..T. Row numbers in error messages count the header as
    row 1.
    """
    space = schema.state_space()
    d = space.dim
    state_cols = ["state"] if d == 1 else [f"state_{k + 1}" for k in range(d)]
    want = ["subject", "trial"] + state_cols + ["action", "reward"]

    per_subject: dict[str, dict[int, TrialRecord]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(want) - set(reader.fieldnames):
            raise IngestionError(
                f"header must contain columns {want}, got {reader.fieldnames}")
        for row_no, rec in enumerate(reader, start=2):
            for colname in want:
                if rec.get(colname) in (None, ""):
                    raise IngestionError(f"row {row_no}: missing value in "
                                         f"column {colname!r}")
            sid = rec["subject"]
            t = int(_parse_float(rec["trial"], row_no, "trial"))
            action_f = _parse_float(rec["action"], row_no, "action")
            action = int(action_f)
            if action != action_f:
                raise IngestionError(f"row {row_no}: action must be integer")
            if not 0 <= action < schema.action_count:
                raise IngestionError(
                    f"row {row_no}: action {action} outside "
                    f"0..{schema.action_count - 1}")
            reward = _parse_float(rec["reward"], row_no, "reward")
            if not 0.0 <= reward <= schema.r_max:
                raise IngestionError(f"row {row_no}: reward {reward} outside "
                                     f"[0, {schema.r_max}]")
            if d == 1:
                state = _parse_float(rec["state"], row_no, "state")
                if space.kind == "categorical":
                    state = int(state)
            else:
                state = tuple(_parse_float(rec[c], row_no, c)
                              for c in state_cols)
            if not space.contains(state):
                raise IngestionError(f"row {row_no}: state {state!r} outside "
                                     f"the declared state space")
            if sid not in per_subject:
                per_subject[sid] = {}
                order.append(sid)
            if t in per_subject[sid]:
                raise IngestionError(f"row {row_no}: duplicate trial {t} for "
                                     f"subject {sid!r}")
            per_subject[sid][t] = TrialRecord(t=t, state=state, action=action,
                                              reward=reward)

    if not order:
        raise IngestionError("no data rows found")
    horizons = {sid: len(trials) for sid, trials in per_subject.items()}
    T = schema.horizon or max(horizons.values())
    sessions = []
    for sid in order:
        trials = per_subject[sid]
        if len(trials) != T:
            raise IngestionError(
                f"subject {sid!r} has horizon {len(trials)}, expected {T} "
                f"(ragged horizons are rejected)")
        if sorted(trials) != list(range(1, T + 1)):
            raise IngestionError(f"subject {sid!r}: trial indices are not a "
                                 f"permutation of 1..{T}")
        sessions.append(Session(sid, tuple(trials[t] for t in range(1, T + 1))))
    return Dataset(tuple(sessions), space, schema.action_count, T,
                   schema.r_max)


def write_dataset(dataset: Dataset, path) -> None:
    """Write the session CSV (sorted by session order, then trial)."""
    d = dataset.state_space.dim
    state_cols = ["state"] if d == 1 else [f"state_{k + 1}" for k in range(d)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject", "trial"] + state_cols + ["action",
                                                             "reward"])
        for sess in dataset.sessions:
            for rec in sess.trials:
                state = [rec.state] if d == 1 else list(rec.state)
                writer.writerow([sess.subject_id, rec.t, *
                                 [format(v, ".17g") for v in state],
                                 rec.action, format(rec.reward, ".17g")])


def schema_for(dataset: Dataset) -> DatasetSchema:
    space = dataset.state_space
    bounds = (space.levels if space.kind == "categorical"
              else [list(b) for b in space.bounds])
    return DatasetSchema(action_count=dataset.action_count,
                         state_kind=space.kind, state_bounds=bounds,
                         horizon=dataset.horizon, r_max=dataset.r_max)
