"""Model selection and uncertainty: K-fold cross-validation over a penalty
grid and the whole-session nonparametric bootstrap with normal-theory
intervals (logit scale for the initial engagement probability).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from . import em
from .core import BasisSpec, ConfigError, Dataset, ModelParams, NumericalError
from .genlasso import PenaltySpec

Z95 = 1.959963984540054  # two-sided 95% normal quantile


def _enc(v: float):
    return "inf" if math.isinf(v) else float(v)


def _fmt_lam(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.17g}"


@dataclass(frozen=True)
class CvReport:
    """Grid scores from K-fold cross-validation.

    scores[i] is the (nT)^-1-normalized held-out log-likelihood aggregate for
    grid[i]; fold_scores[i][k] the same sum restricted to fold k (already
    normalized by nT, so scores[i] = sum over k). best is the maximizing
    grid point, exact ties broken toward the larger (lambda0, lambda1).
    """

    grid: tuple[tuple[float, float], ...]
    scores: tuple[float, ...]
    fold_scores: tuple[tuple[float, ...], ...]
    K: int
    seed: int
    best: tuple[float, float]
    metadata: dict

    def __post_init__(self):
        if len(self.scores) != len(self.grid):
            raise ConfigError("one score per grid point required")
        if not all(math.isfinite(s) for s in self.scores):
            raise NumericalError("non-finite CV score")
        if max(self.scores) != self.scores[self.grid.index(self.best)]:
            raise ConfigError("best grid point must attain the maximum score")

    @property
    def best_score(self) -> float:
        return max(self.scores)

    def to_json_dict(self) -> dict:
        return {
            "K": self.K, "seed": self.seed,
            "grid": [[_enc(l0), _enc(l1)] for l0, l1 in self.grid],
            "scores": list(self.scores),
            "fold_scores": [list(r) for r in self.fold_scores],
            "best": [_enc(self.best[0]), _enc(self.best[1])],
            "best_score": self.best_score,
            "metadata": self.metadata,
        }


@dataclass(frozen=True)
class BootstrapReport:
    """Replicate estimates and normal-theory 95% intervals.

    estimates holds successful replicates on the raw scale; se is the
    raw-scale sample standard deviation (ddof=1). The pi1 interval is built
    on the logit scale and mapped back, so it always stays inside (0, 1);
    all other intervals are center +/- 1.96 se.
    """

    B: int
    param_names: tuple[str, ...]
    estimates: np.ndarray
    center: np.ndarray
    se: np.ndarray
    ci95: np.ndarray
    targets: tuple[int, ...]
    failures: tuple[str, ...]
    degenerate: bool
    seed: int
    warm_start: bool

    def __post_init__(self):
        for name, arr in (("estimates", self.estimates),
                          ("center", self.center), ("se", self.se),
                          ("ci95", self.ci95)):
            a = np.ascontiguousarray(np.asarray(arr, dtype=float))
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        P = len(self.param_names)
        if self.center.shape != (P,) or self.ci95.shape != (P, 2):
            raise ConfigError("report dimensions are inconsistent")
        bad = self.ci95[:, 0] > self.ci95[:, 1]
        if np.any(bad):
            raise NumericalError("inverted confidence interval for "
                                 + ", ".join(np.asarray(self.param_names)[bad]))

    @property
    def n_success(self) -> int:
        return self.estimates.shape[0]

    def to_json_dict(self) -> dict:
        return {
            "B": self.B, "seed": self.seed, "warm_start": self.warm_start,
            "targets": list(self.targets),
            "param_names": list(self.param_names),
            "center": self.center.tolist(),
            "se": self.se.tolist(),
            "ci95": self.ci95.tolist(),
            "n_success": self.n_success,
            "failures": list(self.failures),
            "degenerate": self.degenerate,
            "estimates": self.estimates.tolist(),
        }


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------

def fold_assignments(n: int, K: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle split of 0..n-1 into K contiguous chunks."""
    if K < 2:
        raise ConfigError("K must be >= 2")
    if n < K:
        raise ConfigError(f"need at least K={K} subjects, got {n}")
    perm = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n)
    folds = np.array_split(perm, K)
    if any(f.size == 0 for f in folds):
        raise ConfigError("empty cross-validation fold")
    return folds


def _normalize_grid(grid) -> list[tuple[float, float]]:
    out = []
    for pair in grid:
        l0, l1 = pair
        l0, l1 = float(l0), float(l1)
        if l0 < 0 or l1 < 0 or math.isnan(l0) or math.isnan(l1):
            raise ConfigError(f"invalid penalty pair ({l0}, {l1})")
        out.append((l0, l1))
    if not out:
        raise ConfigError("empty penalty grid")
    return out


def cross_validate(data: Dataset, spec: BasisSpec, config: em.FitConfig,
                   grid, K: int) -> CvReport:
    """Score every penalty pair by K-fold held-out log-likelihood.

    Within each fold the unique grid points are visited from the largest
    (lambda0, lambda1) down, warm-starting each fit from the previous
    point's solution; the first (largest) point uses the configured
    multi-start. Scores are (nT)^-1 sums of held-out per-subject observed
    log-likelihoods, each subject appearing in exactly one fold.
    """
    points = _normalize_grid(grid)
    unique = sorted(set(points), reverse=True)
    folds = fold_assignments(data.n_subjects, K, config.seed)
    n, T = data.n_subjects, data.horizon
    all_idx = np.arange(n)

    point_fold: dict[tuple[float, float], list[float]] = \
        {pt: [] for pt in unique}
    for fold in folds:
        train = data.subset(np.setdiff1d(all_idx, fold))
        held_ws = em._Workspace(data.subset(fold), spec)
        warm: ModelParams | None = None
        for pt in unique:
            cfg = replace(config, penalty=PenaltySpec(config.penalty.r,
                                                      pt[0], pt[1]))
            if warm is None:
                res = em.fit(train, spec, cfg)
            else:
                res = em.fit_warm(train, spec, cfg, warm)
            warm = res.params
            held_ll = float(held_ws.posteriors(res.params).log_lik.sum())
            point_fold[pt].append(held_ll / (n * T))

    fold_scores = tuple(tuple(point_fold[pt]) for pt in points)
    scores = tuple(float(sum(point_fold[pt])) for pt in points)
    best = max(zip(scores, points))[1]
    return CvReport(
        grid=tuple(points), scores=scores, fold_scores=fold_scores,
        K=K, seed=config.seed, best=best,
        metadata={
            "model": "switching",
            "grid_style": "declared grid; solution-path knots not traced",
            "fold_sizes": [int(f.size) for f in folds],
            "warm_start_path": "descending (lambda0, lambda1)",
        })


def rl_only_cv_score(data: Dataset, spec: BasisSpec, config: em.FitConfig,
                     K: int) -> float:
    """Held-out score of the no-switching comparator on the same folds that
    cross_validate(config.seed) uses, normalized identically."""
    folds = fold_assignments(data.n_subjects, K, config.seed)
    n, T = data.n_subjects, data.horizon
    all_idx = np.arange(n)
    total = 0.0
    for fold in folds:
        train = data.subset(np.setdiff1d(all_idx, fold))
        res = em.fit_rl_only(train, spec, config)
        held = data.subset(fold)
        total += float(em.rl_only_loglik(res.params, spec, held).sum())
    return total / (n * T)


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def _param_vector(params: ModelParams, spec: BasisSpec,
                  targets: tuple[int, ...],
                  alpha_free: bool) -> tuple[list[str], list[float]]:
    names = ["beta", "rho"]
    values = [params.beta, params.rho]
    for a in range(1, spec.action_count):
        if spec.nu_free[a - 1]:
            names.append(f"nu_{a}")
            values.append(params.nu[a - 1])
    if alpha_free:
        names.append("alpha")
        values.append(params.alpha_scalar)
    names.append("pi1")
    values.append(params.pi1)
    for j, curve in ((0, params.zeta0), (1, params.zeta1)):
        for t in targets:
            names.append(f"zeta{j}_t{t}")
            values.append(float(curve[t - 1]))
    return names, values


def default_targets(T: int) -> tuple[int, int]:
    """Quarter and three-quarter trial indices for transition-curve CIs."""
    return (max(1, T // 4), max(1, (3 * T) // 4))


def bootstrap(data: Dataset, spec: BasisSpec, config: em.FitConfig, B: int,
              targets: tuple[int, ...] | None = None,
              warm_start: bool = True) -> BootstrapReport:
    """Whole-session resampling with replacement; every replicate refits the
    model (warm-started at the full-data estimate unless warm_start=False)
    and the spread of the replicate estimates gives the standard errors.
    """
    if B < 2:
        raise ConfigError("B must be >= 2")
    n, T = data.n_subjects, data.horizon
    targets = tuple(targets) if targets else default_targets(T)
    for t in targets:
        if not 1 <= t <= T - 1:
            raise ConfigError(f"zeta target t={t} outside 1..{T - 1}")

    full = em.fit(data, spec, config)
    alpha_free = bool(np.any(np.asarray(spec.alpha_pattern) != 0.0))
    names, center = _param_vector(full.params, spec, targets, alpha_free)

    rows: list[list[float]] = []
    failures: list[str] = []
    children = np.random.SeedSequence(config.seed).spawn(B)
    for b in range(B):
        rng = np.random.default_rng(children[b])
        idx = rng.integers(0, n, size=n)
        bdata = data.subset(idx)
        try:
            if warm_start:
                res = em.fit_warm(bdata, spec, config, full.params)
            else:
                res = em.fit(bdata, spec, config)
            rows.append(_param_vector(res.params, spec, targets,
                                      alpha_free)[1])
        except NumericalError as exc:
            failures.append(f"replicate {b}: {exc}")
            if len(failures) > 0.2 * B:
                raise NumericalError(
                    f"bootstrap aborted: {len(failures)} of {b + 1} "
                    f"replicates failed (> 20% of B={B}); first failure: "
                    f"{failures[0]}") from exc

    est = np.asarray(rows, dtype=float)
    center = np.asarray(center, dtype=float)
    se = est.std(axis=0, ddof=1)
    ci = np.stack([center - Z95 * se, center + Z95 * se], axis=1)
    k = names.index("pi1")
    se_logit = float(np.std(logit(est[:, k]), ddof=1))
    clog = logit(center[k])
    ci[k] = expit([clog - Z95 * se_logit, clog + Z95 * se_logit])
    degenerate = bool(np.all(est == est[:1]))
    return BootstrapReport(
        B=B, param_names=tuple(names), estimates=est, center=center,
        se=se, ci95=ci, targets=targets, failures=tuple(failures),
        degenerate=degenerate, seed=config.seed, warm_start=warm_start)


# ---------------------------------------------------------------------------
# artifact files
# ---------------------------------------------------------------------------

def write_cv_report(report: CvReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "cv.json", "scores": out / "cv_scores.csv",
             "folds": out / "cv_fold_scores.csv"}
    paths["json"].write_text(json.dumps(report.to_json_dict(), indent=2)
                             + "\n")
    lines = ["lambda0,lambda1,score"]
    for (l0, l1), s in zip(report.grid, report.scores):
        lines.append(f"{_fmt_lam(l0)},{_fmt_lam(l1)},{s:.17g}")
    paths["scores"].write_text("\n".join(lines) + "\n")
    lines = ["lambda0,lambda1,fold,score"]
    for (l0, l1), per_fold in zip(report.grid, report.fold_scores):
        for k, s in enumerate(per_fold):
            lines.append(f"{_fmt_lam(l0)},{_fmt_lam(l1)},{k},{s:.17g}")
    paths["folds"].write_text("\n".join(lines) + "\n")
    return paths


def write_bootstrap_report(report: BootstrapReport, out_dir) \
        -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "bootstrap.json",
             "replicates": out / "bootstrap_replicates.csv",
             "ci": out / "bootstrap_ci.csv"}
    paths["json"].write_text(json.dumps(report.to_json_dict(), indent=2)
                             + "\n")
    lines = ["replicate,param,value"]
    for b in range(report.n_success):
        for name, v in zip(report.param_names, report.estimates[b]):
            lines.append(f"{b},{name},{v:.17g}")
    paths["replicates"].write_text("\n".join(lines) + "\n")
    lines = ["param,estimate,se,lower,upper"]
    for j, name in enumerate(report.param_names):
        lines.append(f"{name},{report.center[j]:.17g},{report.se[j]:.17g},"
                     f"{report.ci95[j, 0]:.17g},{report.ci95[j, 1]:.17g}")
    paths["ci"].write_text("\n".join(lines) + "\n")
    return paths
