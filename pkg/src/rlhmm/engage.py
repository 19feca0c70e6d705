"""Engagement summaries computed from posterior engaged-state probabilities:
per-subject trajectories, the group rate with optional bootstrap bands, and
window-averaged logit scores.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logit

from .core import ConfigError, DomainError
from .hmm import PosteriorSet

GAMMA_CLAMP = 1e-12  # keeps the logit finite at gamma in {0, 1}


def _as_gamma(posteriors) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(posteriors, PosteriorSet):
        gamma = np.asarray(posteriors.gamma[:, :, 1])
        ids = tuple(posteriors.subject_ids)
    else:
        gamma = np.asarray(posteriors, dtype=float)
        if gamma.ndim != 2:
            raise DomainError("expected an (n, T) engaged-probability matrix")
        ids = tuple(f"s{i + 1:04d}" for i in range(gamma.shape[0]))
    if gamma.size == 0 or np.any(~np.isfinite(gamma)) \
            or gamma.min() < 0.0 or gamma.max() > 1.0:
        raise DomainError("engaged probabilities must lie in [0, 1]")
    return gamma, ids


@dataclass(frozen=True)
class EngagementReport:
    """individual[i, t] is gamma_i1t; group_rate its exact subject mean;
    scores[i, w] the window-mean logit (engagement score) for window w."""

    subject_ids: tuple[str, ...]
    individual: np.ndarray
    group_rate: np.ndarray
    windows: tuple[tuple[int, ...], ...]
    scores: np.ndarray
    band_lower: np.ndarray | None = None
    band_upper: np.ndarray | None = None

    def __post_init__(self):
        for name in ("individual", "group_rate", "scores",
                     "band_lower", "band_upper"):
            arr = getattr(self, name)
            if arr is None:
                continue
            a = np.ascontiguousarray(np.asarray(arr, dtype=float))
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        n, T = self.individual.shape
        if len(self.subject_ids) != n or self.group_rate.shape != (T,):
            raise DomainError("report dimensions are inconsistent")
        if self.scores.shape != (n, len(self.windows)):
            raise DomainError("one score per subject and window required")
        if (self.band_lower is None) != (self.band_upper is None):
            raise ConfigError("bands need both lower and upper curves")

    def to_json_dict(self) -> dict:
        doc = {"subject_ids": list(self.subject_ids),
               "windows": [list(w) for w in self.windows],
               "group_rate": self.group_rate.tolist(),
               "scores": self.scores.tolist()}
        if self.band_lower is not None:
            doc["band_lower"] = self.band_lower.tolist()
            doc["band_upper"] = self.band_upper.tolist()
        return doc


def default_windows(T: int) -> tuple[tuple[int, ...], ...]:
    """Quartile windows of 1..T (four near-equal contiguous periods)."""
    parts = np.array_split(np.arange(1, T + 1), 4)
    return tuple(tuple(int(t) for t in part) for part in parts if part.size)


def _check_windows(windows, T: int) -> tuple[tuple[int, ...], ...]:
    out = []
    for w, window in enumerate(windows):
        idx = tuple(int(t) for t in window)
        if not idx:
            raise ConfigError(f"window {w} is empty")
        for t in idx:
            if not 1 <= t <= T:
                raise ConfigError(
                    f"window {w} contains trial {t} outside 1..{T}")
        out.append(idx)
    if not out:
        raise ConfigError("need at least one window")
    return tuple(out)


def engagement_scores(posteriors, windows) -> np.ndarray:
    """ES_i(window) = mean over the window of logit(gamma_i1t), with gamma
    clamped to [1e-12, 1 - 1e-12] first."""
    gamma, _ = _as_gamma(posteriors)
    windows = _check_windows(windows, gamma.shape[1])
    logits = logit(np.clip(gamma, GAMMA_CLAMP, 1.0 - GAMMA_CLAMP))
    out = np.empty((gamma.shape[0], len(windows)))
    for w, idx in enumerate(windows):
        cols = np.asarray(idx) - 1
        out[:, w] = logits[:, cols].mean(axis=1)
    return out


def group_rate_bands(posteriors, B: int = 1000, seed: int = 0,
                     level: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise normal-theory bands for the group engagement rate.

    Subjects' posterior trajectories are resampled with replacement (no
    refitting); bands are centered at the full-sample mean, so they always
    contain the point estimate.
    """
    from scipy.stats import norm
    if not 0.0 < level < 1.0:
        raise ConfigError("level must be in (0, 1)")
    gamma, _ = _as_gamma(posteriors)
    n, T = gamma.shape
    center = gamma.mean(axis=0)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    means = np.empty((B, T))
    for b in range(B):
        means[b] = gamma[rng.integers(0, n, size=n)].mean(axis=0)
    z = float(norm.ppf(0.5 + level / 2.0))
    half = z * means.std(axis=0, ddof=1)
    return np.clip(center - half, 0.0, 1.0), np.clip(center + half, 0.0, 1.0)


def engagement_report(posteriors, windows=None,
                      bands: tuple[np.ndarray, np.ndarray] | None = None,
                      subject_ids=None) -> EngagementReport:
    """Assemble trajectories, group rate, and window scores in one report."""
    gamma, ids = _as_gamma(posteriors)
    if subject_ids is not None:
        if len(subject_ids) != gamma.shape[0]:
            raise DomainError("subject_ids length does not match gamma rows")
        ids = tuple(str(s) for s in subject_ids)
    T = gamma.shape[1]
    windows = _check_windows(windows if windows is not None
                             else default_windows(T), T)
    scores = engagement_scores(gamma, windows)
    lower, upper = bands if bands is not None else (None, None)
    return EngagementReport(subject_ids=ids, individual=gamma,
                            group_rate=gamma.mean(axis=0), windows=windows,
                            scores=scores, band_lower=lower,
                            band_upper=upper)


def _window_label(window: tuple[int, ...]) -> str:
    lo, hi = min(window), max(window)
    if window == tuple(range(lo, hi + 1)):
        return f"t{lo}-{hi}"
    return "t" + "+".join(str(t) for t in window)


def write_engagement(report: EngagementReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"individual": out / "engagement_individual.csv",
             "group": out / "engagement_group.csv",
             "scores": out / "engagement_scores.csv",
             "json": out / "engagement.json"}
    n, T = report.individual.shape
    lines = ["subject,trial,gamma_engaged"]
    for i, sid in enumerate(report.subject_ids):
        for t in range(T):
            lines.append(f"{sid},{t + 1},{report.individual[i, t]:.17g}")
    paths["individual"].write_text("\n".join(lines) + "\n")

    banded = report.band_lower is not None
    lines = ["trial,rate,lower,upper"] if banded else ["trial,rate"]
    for t in range(T):
        row = f"{t + 1},{report.group_rate[t]:.17g}"
        if banded:
            row += (f",{report.band_lower[t]:.17g}"
                    f",{report.band_upper[t]:.17g}")
        lines.append(row)
    paths["group"].write_text("\n".join(lines) + "\n")

    labels = [_window_label(w) for w in report.windows]
    lines = ["subject,window,score"]
    for i, sid in enumerate(report.subject_ids):
        for w, label in enumerate(labels):
            lines.append(f"{sid},{label},{report.scores[i, w]:.17g}")
    paths["scores"].write_text("\n".join(lines) + "\n")
    paths["json"].write_text(json.dumps(report.to_json_dict(), indent=2)
                             + "\n")
    return paths
