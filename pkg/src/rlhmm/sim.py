"""Seeded synthetic-data generation: the two uniform-state recovery designs
(with and without a lapse chain) and a probabilistic-reward-task style block
design with controlled reward totals.

Per-session randomness order, for byte-exact reproducibility: all states are
drawn first, then per trial an action uniform, a reward draw where the
schedule calls for one, and (switching designs only, t < T) one transition
uniform. Sessions use independent child streams spawned from the scenario
seed, so subject-level parallelism cannot change the output.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .core import (BasisSpec, ConfigError, Dataset, DomainError, ModelParams,
                   Session, StateSpace, TrialRecord, basis_tensor,
                   schema_for, write_dataset, write_schema)
from .rl import check_learning_rate, softmax_rows

NO_LAPSE_EDGE = 1e-6  # pi1 / transition mass left outside "always engaged"
RICH, LEAN = 1, 0


@dataclass(frozen=True)
class PrtSchedule:
    """Block reward budget: totals of rewarded correct trials per type."""

    block_len: int = 100
    rewards_rich: int = 30
    rewards_lean: int = 10

    def __post_init__(self):
        if self.block_len < 2 or self.block_len % 2:
            raise ConfigError("block_len must be even and >= 2")
        half = self.block_len // 2
        for name in ("rewards_rich", "rewards_lean"):
            v = getattr(self, name)
            if not 0 <= v <= half:
                raise ConfigError(
                    f"{name}={v} outside 0..{half} (positions per type)")

    def to_dict(self) -> dict:
        return {"block_len": self.block_len,
                "rewards_rich": self.rewards_rich,
                "rewards_lean": self.rewards_lean}


class PrtAllocator:
    """Sequential without-replacement placement of the block reward budget.

    At each position of stimulus type s the remaining-position count u_s
    includes the current trial; a correct response is rewarded with
    probability m_s / u_s (remaining quota over remaining positions), which
    reproduces uniform placement over the block's type-s trials and hits the
    quota exactly whenever every type-s trial is correct. Incorrect trials
    are never rewarded and consume no randomness.
    """

    def __init__(self, schedule: PrtSchedule):
        self.schedule = schedule
        self.shortfall = 0
        self._seen = 0
        self._quota: dict[int, int] = {}
        self._positions: dict[int, int] = {}

    def _start_block(self) -> None:
        half = self.schedule.block_len // 2
        for stim, left in self._quota.items():
            self.shortfall += left
        self._quota = {RICH: self.schedule.rewards_rich,
                       LEAN: self.schedule.rewards_lean}
        self._positions = {RICH: half, LEAN: half}

    def draw(self, stimulus: int, correct: bool,
             rng: np.random.Generator) -> float:
        if self._seen % self.schedule.block_len == 0:
            self._start_block()
        self._seen += 1
        u = self._positions[stimulus]
        if u <= 0:
            raise DomainError("more type-%d trials than the block holds"
                              % stimulus)
        self._positions[stimulus] = u - 1
        m = self._quota[stimulus]
        if not correct or m == 0:
            return 0.0
        if rng.random() < min(1.0, m / u):
            self._quota[stimulus] = m - 1
            return 1.0
        return 0.0

    def finish(self) -> int:
        """Account for the last block; returns total unplaced rewards."""
        for left in self._quota.values():
            self.shortfall += left
        self._quota = {}
        return self.shortfall


@dataclass(frozen=True)
class SimScenario:
    """Generating configuration: truth parameters, basis, and reward model.

    kind "case1" is the switching design (uniform states, Bernoulli rewards
    with success p_a * {a s + (1-a)(1-s)}), "case2" the same learner without
    lapses (hidden state pinned engaged), "prt" the block reward design.
    """

    kind: str
    n: int
    T: int
    params: ModelParams
    spec: BasisSpec
    seed: int = 0
    p_success: tuple[float, float] | None = None
    prt: PrtSchedule | None = None

    def __post_init__(self):
        if self.kind not in ("case1", "case2", "prt"):
            raise ConfigError(f"unknown scenario kind {self.kind!r}")
        if self.n < 1 or self.T < 2:
            raise ConfigError("need n >= 1 subjects and T >= 2 trials")
        for curve in (self.params.zeta0, self.params.zeta1):
            if curve.shape[0] != self.T - 1:
                raise ConfigError(
                    f"transition curves must have length T-1={self.T - 1}, "
                    f"got {curve.shape[0]}")
        if self.kind == "prt":
            if self.prt is None:
                raise ConfigError("prt scenario needs a PrtSchedule")
            if self.T % self.prt.block_len:
                raise ConfigError(
                    f"T={self.T} is not a whole number of "
                    f"{self.prt.block_len}-trial blocks")
        else:
            if self.prt is not None:
                raise ConfigError("prt schedule only applies to kind='prt'")
            if self.spec.action_count != 2:
                raise ConfigError("the Bernoulli reward map is binary-action")
            if self.p_success is None:
                raise ConfigError(f"{self.kind} needs p_success=(p0, p1)")
            if not all(0.0 <= p <= 1.0 for p in self.p_success):
                raise ConfigError("success probabilities must lie in [0, 1]")

    @property
    def engaged_only(self) -> bool:
        return self.kind == "case2"

    def state_space(self) -> StateSpace:
        if self.kind == "prt":
            return StateSpace("categorical", levels=2)
        return StateSpace("continuous", bounds=((0.0, 1.0),))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n, "T": self.T,
                "seed": self.seed,
                "p_success": list(self.p_success) if self.p_success else None,
                "prt": self.prt.to_dict() if self.prt else None}


@dataclass(frozen=True)
class SimOutput:
    """Generated data plus the ground truth that produced it."""

    dataset: Dataset
    hidden_strategies: np.ndarray  # (n, T) in {0, 1}
    truth: ModelParams
    scenario: SimScenario
    reward_shortfalls: tuple[int, ...] = ()

    def __post_init__(self):
        h = np.ascontiguousarray(np.asarray(self.hidden_strategies,
                                            dtype=np.int8))
        if h.shape != (self.dataset.n_subjects, self.dataset.horizon):
            raise DomainError("hidden_strategies shape does not match "
                              "the dataset")
        h.flags.writeable = False
        object.__setattr__(self, "hidden_strategies", h)


def piecewise_curves(T: int) -> tuple[np.ndarray, np.ndarray]:
    """The recovery design's transition logits: both curves double once the
    trial index reaches T/2 (the comparison is on the real value T/2, taken
    literally, so odd T shifts the knot to ceil(T/2))."""
    t = np.arange(1, T)
    second_half = (t >= T / 2).astype(float)
    return -1.5 * (1.0 + second_half), 2.0 * (1.0 + second_half)


def _recovery_basis() -> BasisSpec:
    return BasisSpec(kind="linear", action_count=2, state_dim=1,
                     alpha_pattern=(1.0, -1.0, 0.0, 1.0), nu_free=(True,))


def case1_scenario(n: int = 100, T: int = 100, seed: int = 0,
                   beta: float = 0.05, rho: float = 4.0, nu1: float = 0.0,
                   alpha_scalar: float = 2.0, pi1: float = 0.8,
                   p_success: tuple[float, float] = (0.5, 1.0),
                   zeta0: np.ndarray | None = None,
                   zeta1: np.ndarray | None = None) -> SimScenario:
    """Switching recovery design with piecewise-constant transition curves."""
    z0, z1 = piecewise_curves(T)
    params = ModelParams(beta=beta, rho=rho, nu=(nu1,),
                         alpha_scalar=alpha_scalar, pi1=pi1,
                         zeta0=z0 if zeta0 is None else zeta0,
                         zeta1=z1 if zeta1 is None else zeta1)
    return SimScenario(kind="case1", n=n, T=T, params=params,
                       spec=_recovery_basis(), seed=seed,
                       p_success=tuple(p_success))


def case2_scenario(n: int = 100, T: int = 100, seed: int = 0,
                   beta: float = 0.05, rho: float = 4.0, nu1: float = 0.0,
                   alpha_scalar: float = 2.0,
                   p_success: tuple[float, float] = (0.5, 1.0)) -> SimScenario:
    """Always-engaged variant: the generator never leaves the learner state,
    and the stored truth pins the chain at the engaged edge of the domain."""
    edge = float(logit(1.0 - NO_LAPSE_EDGE))
    params = ModelParams(beta=beta, rho=rho, nu=(nu1,),
                         alpha_scalar=alpha_scalar, pi1=1.0 - NO_LAPSE_EDGE,
                         zeta0=np.full(T - 1, edge),
                         zeta1=np.full(T - 1, edge))
    return SimScenario(kind="case2", n=n, T=T, params=params,
                       spec=_recovery_basis(), seed=seed,
                       p_success=tuple(p_success))


def prt_scenario(n: int = 100, blocks: int = 1, seed: int = 0,
                 beta: float = 0.05, rho: float = 4.0,
                 alpha_scalar: float = 2.0, pi1: float = 0.8,
                 schedule: PrtSchedule | None = None) -> SimScenario:
    """Two-stimulus block design; intercepts pinned, indicator basis with
    initial preference for the correct response of each type."""
    schedule = schedule or PrtSchedule()
    T = blocks * schedule.block_len
    spec = BasisSpec(kind="indicator", action_count=2, state_levels=2,
                     alpha_pattern=(1.0, 0.0, 0.0, 1.0),
                     nu_free=(False,))
    params = ModelParams(beta=beta, rho=rho, nu=(0.0,),
                         alpha_scalar=alpha_scalar, pi1=pi1,
                         zeta0=np.full(T - 1, -1.5),
                         zeta1=np.full(T - 1, 2.0))
    return SimScenario(kind="prt", n=n, T=T, params=params, spec=spec,
                       seed=seed, prt=schedule)


def _draw_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(probs), u, side="right"),
                   probs.shape[0] - 1))


def _session_states(scenario: SimScenario,
                    rng: np.random.Generator) -> np.ndarray:
    if scenario.kind != "prt":
        return rng.random(scenario.T)
    half = scenario.prt.block_len // 2
    block = np.array([LEAN] * half + [RICH] * half, dtype=np.int64)
    return np.concatenate([rng.permutation(block)
                           for _ in range(scenario.T
                                          // scenario.prt.block_len)])


def generate(scenario: SimScenario) -> SimOutput:
    """Simulate the scenario; deterministic given its seed."""
    params, spec = scenario.params, scenario.spec
    n, T, D = scenario.n, scenario.T, spec.action_count
    if scenario.kind == "prt":
        check_learning_rate(params.beta, spec)
    else:
        check_learning_rate(params.beta, spec, bounds=((0.0, 1.0),))
    c01 = expit(params.zeta0)
    c11 = expit(params.zeta1)
    nu_full = params.nu_full(D)
    uniform = np.full(D, 1.0 / D)
    lapse_free = scenario.engaged_only

    hidden = np.zeros((n, T), dtype=np.int8)
    sessions = []
    shortfalls = []
    width = max(4, len(str(n)))
    for i, child in enumerate(np.random.SeedSequence(scenario.seed).spawn(n)):
        rng = np.random.default_rng(child)
        states = _session_states(scenario, rng)
        phi = basis_tensor(spec, states[None, :])[0]  # (T, D, p)
        allocator = PrtAllocator(scenario.prt) if scenario.kind == "prt" \
            else None
        delta = params.alpha_coefficients(spec)
        u = 1 if lapse_free else int(rng.random() < params.pi1)
        trials = []
        for t in range(T):
            if u == 1:
                probs = softmax_rows(nu_full + params.rho * (phi[t] @ delta))
            else:
                probs = uniform
            a = _draw_action(probs, rng)
            s = states[t]
            if allocator is not None:
                r = allocator.draw(int(s), correct=(a == int(s)), rng=rng)
            else:
                p = scenario.p_success[a] * (s if a == 1 else 1.0 - s)
                r = 1.0 if rng.random() < p else 0.0
            phi_a = phi[t, a]
            # Eq.-(1)-style update runs regardless of the hidden state
            delta = delta + params.beta * phi_a * (r - phi_a @ delta)
            hidden[i, t] = u
            state_value = int(s) if scenario.kind == "prt" else float(s)
            trials.append(TrialRecord(t=t + 1, state=state_value,
                                      action=a, reward=r))
            if t < T - 1 and not lapse_free:
                stay = c11[t] if u == 1 else c01[t]
                u = int(rng.random() < stay)
        if allocator is not None:
            shortfalls.append(allocator.finish())
        sessions.append(Session(f"s{i + 1:0{width}d}", tuple(trials)))

    dataset = Dataset(tuple(sessions), scenario.state_space(), D, T,
                      r_max=1.0)
    return SimOutput(dataset=dataset, hidden_strategies=hidden,
                     truth=params, scenario=scenario,
                     reward_shortfalls=tuple(shortfalls))


def strategy_accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    """(nT)^-1 sum of exact agreements between two binary matrices."""
    a = np.asarray(predicted)
    b = np.asarray(truth)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float((a == b).mean())


def scenario_from_config(doc: dict) -> SimScenario:
    """Build a scenario from a plain-dict config (the CLI's JSON schema).

    Unknown keys are rejected rather than ignored. A prt config may give
    either "blocks" or a total "T" (which must be a whole number of blocks).
    """
    cfg = dict(doc)
    kind = cfg.pop("kind", None)
    allowed_by_kind = {
        "case1": {"n", "T", "seed", "beta", "rho", "nu1", "alpha_scalar",
                  "pi1", "p_success"},
        "case2": {"n", "T", "seed", "beta", "rho", "nu1", "alpha_scalar",
                  "p_success"},
        "prt": {"n", "T", "blocks", "seed", "beta", "rho", "alpha_scalar",
                "pi1", "schedule"},
    }
    if kind not in allowed_by_kind:
        raise ConfigError(f"unknown scenario kind {kind!r}")
    unknown = set(cfg) - allowed_by_kind[kind]
    if unknown:
        raise ConfigError(f"unknown {kind} scenario keys: {sorted(unknown)}")
    if kind in ("case1", "case2"):
        if "p_success" in cfg:
            cfg["p_success"] = tuple(cfg["p_success"])
        maker = case1_scenario if kind == "case1" else case2_scenario
        return maker(**cfg)
    sched_doc = cfg.pop("schedule", {})
    unknown = set(sched_doc) - {"block_len", "rewards_rich", "rewards_lean"}
    if unknown:
        raise ConfigError(f"unknown prt schedule keys: {sorted(unknown)}")
    schedule = PrtSchedule(**sched_doc)
    if "T" in cfg:
        if "blocks" in cfg:
            raise ConfigError("give either T or blocks, not both")
        T = int(cfg.pop("T"))
        if T <= 0 or T % schedule.block_len:
            raise ConfigError(
                f"T={T} is not a whole number of "
                f"{schedule.block_len}-trial blocks")
        cfg["blocks"] = T // schedule.block_len
    return prt_scenario(schedule=schedule, **cfg)


# ---------------------------------------------------------------------------
# artifact files
# ---------------------------------------------------------------------------

def write_hidden_strategies(output: SimOutput, path) -> None:
    lines = ["subject,trial,engaged"]
    for i, sid in enumerate(output.dataset.subject_ids):
        for t in range(output.dataset.horizon):
            lines.append(f"{sid},{t + 1},{int(output.hidden_strategies[i, t])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_hidden_strategies(path) -> tuple[list[str], np.ndarray]:
    rows = Path(path).read_text().strip().splitlines()
    if rows[0] != "subject,trial,engaged":
        raise ConfigError(f"unexpected header in {path}")
    per: dict[str, list[int]] = {}
    for line in rows[1:]:
        sid, _, val = line.split(",")
        per.setdefault(sid, []).append(int(val))
    ids = list(per)
    return ids, np.asarray([per[s] for s in ids], dtype=np.int8)


def write_truth(output: SimOutput, path) -> None:
    doc = {"scenario": output.scenario.to_dict(),
           "params": output.truth.to_dict(),
           "basis": output.scenario.spec.to_dict(),
           "reward_shortfalls": list(output.reward_shortfalls)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def write_sim_output(output: SimOutput, out_dir) -> dict[str, Path]:
    """dataset.csv + schema.json + hidden_strategies.csv + truth.json +
    basis.json (the last one feeds straight into the fit command)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"dataset": out / "dataset.csv",
             "schema": out / "schema.json",
             "hidden": out / "hidden_strategies.csv",
             "truth": out / "truth.json",
             "basis": out / "basis.json"}
    write_dataset(output.dataset, paths["dataset"])
    write_schema(schema_for(output.dataset), paths["schema"])
    write_hidden_strategies(output, paths["hidden"])
    write_truth(output, paths["truth"])
    basis_doc = {"version": 1, **output.scenario.spec.to_dict()}
    paths["basis"].write_text(json.dumps(basis_doc, indent=2) + "\n")
    return paths
