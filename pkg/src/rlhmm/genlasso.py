"""Least-squares generalized lasso solver for the transition-curve M-step:

    minimize_x  0.5 * ||y - x||^2 + lam * ||D x||_1

with D a banded (weighted discrete-difference) penalty matrix. Solved by
ADMM on the split z = Dx with a banded Cholesky of (I + tau D'D), so each
iteration is O(len(y)). lam = 0 short-circuits to y; lam = +inf is solved
exactly as the Euclidean projection of y onto the null space of D, which is
the time-invariant (fixed-transition) model when D is a difference operator.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded, solveh_banded
from scipy.special import binom

from ._kernels import admm_weighted_fused
from .core import ConfigError, NumericalError

ADMM_MAX_ITERS = 10_000
ADMM_RESIDUAL_TOL = 1e-10
ADMM_RELAXATION = 1.5
ADMM_RESTARTS = 3
GAP_TOL_SCALE = 1e-8


def difference_stencil(order: int) -> np.ndarray:
    """Row stencil of D^(order): signed binomial coefficients, so that
    (D^(k) x)_t = sum_s stencil[s] * x[t+s] reproduces numpy.diff(x, n=k)."""
    k = int(order)
    s = np.arange(k + 1)
    return ((-1.0) ** (k - s)) * binom(k, s)


def build_difference_operator(r: int, m: int) -> np.ndarray:
    """Dense discrete difference operator D^(r+1) of shape (m-r-1, m).

    Rows carry the (r+1)-th difference stencil; r=0 gives first differences
    (the fused-lasso penalty). Entries are exact small integers.
    """
    if r < 0:
        raise ConfigError(f"difference order r={r} must be >= 0")
    rows = m - r - 1
    if rows < 1:
        raise ConfigError(
            f"difference operator needs m >= r+2 (got m={m}, r={r})")
    stencil = difference_stencil(r + 1)
    out = np.zeros((rows, m))
    for s, coef in enumerate(stencil):
        out[np.arange(rows), np.arange(rows) + s] = coef
    return out


@lru_cache(maxsize=32)
def _gram_bands_unweighted(order: int, q: int) -> np.ndarray:
    """Lower bands of D'D for the unweighted difference operator on R^q.

    band[d, b] = (D'D)[b+d, b] = sum_s c[s+d] c[s] over window positions s
    with s <= b <= s + rows - 1.
    """
    c = difference_stencil(order)
    rows = q - order
    band = np.zeros((order + 1, q))
    for d in range(order + 1):
        for s in range(order + 1 - d):
            lo, hi = s, min(s + rows - 1, q - 1 - d)
            if hi >= lo:
                band[d, lo:hi + 1] += c[s + d] * c[s]
    band.flags.writeable = False
    return band


@dataclass(frozen=True)
class WeightedDifference:
    """The banded operator D^(r+1) @ diag(weights) without materializing it.

    This is the M-step's D-tilde = D^(r+1) H^{-1/2} with diagonal H, so all
    linear algebra stays O(size * (r+2)).
    """

    r: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(np.asarray(self.weights, dtype=float))
        if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ConfigError("weights must be finite and positive")
        if w.shape[0] < self.r + 2:
            raise ConfigError(
                f"operator needs size >= r+2 (got {w.shape[0]}, r={self.r})")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def shape(self) -> tuple[int, int]:
        q = self.weights.shape[0]
        return (q - self.r - 1, q)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return np.diff(self.weights * x, n=self.r + 1)

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        out = v
        for _ in range(self.r + 1):
            # adjoint of the first-difference map
            out = -np.diff(out, prepend=0.0, append=0.0)
        return self.weights * out

    def gram_banded(self, tau: float) -> np.ndarray:
        """Lower bands of I + tau * D'D, ready for cholesky_banded."""
        q = self.weights.shape[0]
        base = _gram_bands_unweighted(self.r + 1, q)
        w = self.weights
        ab = np.zeros_like(base)
        for d in range(base.shape[0]):
            ab[d, :q - d] = tau * w[d:] * w[:q - d] * base[d, :q - d]
        ab[0] += 1.0
        return ab

    def ddt_banded(self) -> np.ndarray:
        """Lower bands of D D', for the null-space projection solve."""
        c = difference_stencil(self.r + 1)
        m, q = self.shape
        w2 = self.weights ** 2
        ab = np.zeros((self.r + 2, m))
        for d in range(self.r + 2):
            for s in range(d, self.r + 2):
                ab[d, :m - d] += c[s - d] * c[s] * w2[s:s + m - d]
        return ab

    def dense(self) -> np.ndarray:
        return build_difference_operator(self.r, self.weights.shape[0]) \
            * self.weights


@dataclass(frozen=True)
class _DenseOperator:
    """Adapter giving an explicit (banded) matrix the solver interface."""

    mat: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.mat.shape

    def matvec(self, x):
        return self.mat @ x

    def rmatvec(self, v):
        return self.mat.T @ v

    def _lower_bands(self, M: np.ndarray) -> np.ndarray:
        nz = np.nonzero(M)
        bw = int(np.max(nz[0] - nz[1], initial=0))
        n = M.shape[0]
        ab = np.zeros((bw + 1, n))
        for d in range(bw + 1):
            ab[d, :n - d] = np.diagonal(M, offset=-d)
        return ab

    def gram_banded(self, tau: float) -> np.ndarray:
        M = tau * (self.mat.T @ self.mat)
        M[np.diag_indices_from(M)] += 1.0
        return self._lower_bands(M)

    def ddt_banded(self) -> np.ndarray:
        return self._lower_bands(self.mat @ self.mat.T)

    def dense(self) -> np.ndarray:
        return self.mat


def _as_operator(D):
    if isinstance(D, (WeightedDifference, _DenseOperator)):
        return D
    return _DenseOperator(np.asarray(D, dtype=float))


def null_space_projection(y: np.ndarray, D) -> np.ndarray:
    """Euclidean projection of y onto {x : Dx = 0} via a banded solve."""
    op = _as_operator(D)
    rhs = op.matvec(y)
    sol = solveh_banded(op.ddt_banded(), rhs, lower=True)
    return y - op.rmatvec(sol)


def _soft_threshold(x: np.ndarray, k: float) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - k, 0.0)


def solve_generalized_lasso(y: np.ndarray, D, lam: float,
                            return_dual: bool = False,
                            state: dict | None = None):
    """Minimize 0.5||y - x||^2 + lam ||Dx||_1 to duality gap
    <= 1e-8 * (1 + ||y||^2).

    D may be a WeightedDifference or any banded 2-d array. With return_dual
    the stationarity certificate v is also returned: y - x = D'v holds to
    solve precision and |v| <= lam at optimality.

    state, if given, is a caller-owned dict carrying the split/dual pair
    across calls on slowly drifting problems of the same shape (successive
    M-steps); it only changes the starting point, never the certificate the
    solution must satisfy.
    """
    y = np.ascontiguousarray(np.asarray(y, dtype=float))
    op = _as_operator(D)
    m, q = op.shape
    if y.shape != (q,):
        raise ConfigError(f"y has shape {y.shape}, operator expects ({q},)")
    if lam < 0:
        raise ConfigError(f"penalty weight {lam} must be >= 0")
    if lam == 0.0:
        x = y.copy()
        return (x, np.zeros(m)) if return_dual else x
    if math.isinf(lam):
        x = null_space_projection(y, op)
        if return_dual:
            raise ConfigError("no finite dual certificate at lam = +inf")
        return x

    gap_tol = GAP_TOL_SCALE * (1.0 + float(y @ y))
    tau = 1.0
    z, u = None, None
    if state is not None:
        z_prev, dual_prev = state.get("z"), state.get("dual")
        if z_prev is not None and z_prev.shape == (m,):
            z = z_prev.copy()
            u = dual_prev / tau
    if z is None:
        z = op.matvec(y)
        u = np.zeros(m)
    gap = np.inf
    if isinstance(op, WeightedDifference):
        # compiled inner loop; z and u persist across tau restarts
        for _ in range(ADMM_RESTARTS + 1):
            factor = np.ascontiguousarray(
                cholesky_banded(op.gram_banded(tau), lower=True))
            x, v, gap, _, status = admm_weighted_fused(
                y, op.weights, op.r + 1, factor, tau, lam, ADMM_RELAXATION,
                ADMM_MAX_ITERS, gap_tol, ADMM_RESIDUAL_TOL, z, u)
            if status == 1:
                if state is not None:
                    state["z"], state["dual"] = z.copy(), tau * u
                return (x, v) if return_dual else x
            u *= 0.1
            tau *= 10.0
        raise NumericalError(
            f"generalized lasso did not reach duality gap {gap_tol:.3e} "
            f"(residual gap {gap:.3e})")

    Dy = op.matvec(y)
    x = y.copy()
    for _ in range(ADMM_RESTARTS + 1):
        factor = cholesky_banded(op.gram_banded(tau), lower=True)
        thresh = lam / tau
        for _ in range(ADMM_MAX_ITERS):
            x = cho_solve_banded((factor, True),
                                 y + tau * op.rmatvec(z - u))
            Dx = op.matvec(x)
            v = tau * (Dx - z + u)
            vc = np.clip(v, -lam, lam)
            primal = 0.5 * float((y - x) @ (y - x)) \
                + lam * float(np.abs(Dx).sum())
            dual = float(vc @ Dy) - 0.5 * float(op.rmatvec(vc)
                                                @ op.rmatvec(vc))
            gap = primal - dual
            if gap <= gap_tol:
                if state is not None:
                    state["z"], state["dual"] = z.copy(), tau * u
                return (x, v) if return_dual else x
            z_prev = z
            dx_relaxed = ADMM_RELAXATION * Dx + (1.0 - ADMM_RELAXATION) * z
            z = _soft_threshold(dx_relaxed + u, thresh)
            u = u + dx_relaxed - z
            r_primal = float(np.linalg.norm(Dx - z))
            r_dual = float(np.linalg.norm(tau * op.rmatvec(z - z_prev)))
            if r_primal <= ADMM_RESIDUAL_TOL and r_dual <= ADMM_RESIDUAL_TOL:
                break
        else:
            # stalled at the iteration cap: restart with a stiffer tau
            u = u * (tau / (tau * 10.0))
            tau *= 10.0
            continue
        # residual-converged; accept if the gap certificate also holds
        if gap <= gap_tol:
            if state is not None:
                state["z"], state["dual"] = z.copy(), tau * u
            return (x, v) if return_dual else x
        u = u * (tau / (tau * 10.0))
        tau *= 10.0
    raise NumericalError(
        f"generalized lasso did not reach duality gap {gap_tol:.3e} "
        f"(residual gap {gap:.3e})")


@dataclass(frozen=True)
class PenaltySpec:
    """Trend-filter penalty: order r and per-state weights (lambda0 for the
    lapse row, lambda1 for the engaged row); +inf pins a curve to the null
    space of the difference operator (time-invariant transitions)."""

    r: int
    lambda0: float
    lambda1: float

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 0:
            raise ConfigError(f"trend-filter order r={self.r} must be an "
                              f"integer >= 0")
        object.__setattr__(self, "r", int(self.r))
        for name in ("lambda0", "lambda1"):
            val = float(getattr(self, name))
            if math.isnan(val) or val < 0:
                raise ConfigError(f"{name}={val} must be >= 0 or +inf")
            object.__setattr__(self, name, val)

    def lam(self, j: int) -> float:
        return self.lambda0 if j == 0 else self.lambda1

    def operator(self, m: int) -> np.ndarray:
        return build_difference_operator(self.r, m)

    def penalty_value(self, zeta0: np.ndarray, zeta1: np.ndarray) -> float:
        """Penalty term of the objective; +inf curves contribute 0 because
        their iterates are kept exactly in the operator's null space."""
        total = 0.0
        for lam, zeta in ((self.lambda0, zeta0), (self.lambda1, zeta1)):
            if math.isinf(lam):
                continue
            total += lam * float(np.abs(np.diff(zeta, n=self.r + 1)).sum())
        return total

    def to_dict(self) -> dict:
        enc = lambda v: "inf" if math.isinf(v) else v
        return {"r": self.r, "lambda0": enc(self.lambda0),
                "lambda1": enc(self.lambda1)}

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltySpec":
        known = {"r", "lambda0", "lambda1"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown penalty keys: {sorted(unknown)}")
        dec = lambda v: math.inf if v in ("inf", "Infinity") else float(v)
        return cls(r=int(d.get("r", 0)), lambda0=dec(d["lambda0"]),
                   lambda1=dec(d["lambda1"]))


def default_penalty_grid(per_decade: int = 20,
                         decades: tuple[float, float] = (-3.0, 3.0),
                         scale: float = 1.0) -> tuple[tuple[float, float], ...]:
    """Log-spaced tied (lambda, lambda) pairs plus the +inf sentinel pair.

    This is the declared stand-in for following the exact solution-path
    knots; the grid actually used is echoed in cross-validation reports.
    """
    lo, hi = decades
    count = int(round((hi - lo) * per_decade)) + 1
    vals = scale * np.logspace(lo, hi, count)
    grid = [(float(v), float(v)) for v in vals]
    grid.append((math.inf, math.inf))
    return tuple(grid)
