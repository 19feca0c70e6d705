"""Box-constrained quasi-Newton minimizer with central-difference gradients.

Limited-memory BFGS directions with gradient projection onto the box and an
Armijo backtracking line search that only ever accepts decreases, so a single
call with max_iters=1 is a valid generalized-EM partial update. Gradients are
numerical because the RL-block objective re-propagates whole coefficient
trajectories per evaluation and has no tractable closed form.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, NumericalError

GRAD_STEP = float(np.cbrt(np.finfo(float).eps))  # ~6.06e-6
ARMIJO_C = 1e-4
LINESEARCH_TOL = 1e-14
MAX_HALVINGS = 60


@dataclass(frozen=True)
class BoxSpec:
    """Closed per-coordinate bounds; +-inf entries leave a side open.

    Open constraints of the model (rho > 0, 0 < beta < 1) are realized as
    closed boxes shrunk by small interior margins chosen by the caller.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigError("lower/upper must be 1-d and of equal length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise ConfigError("bounds must not be NaN")
        if not np.all(lo < hi):
            raise ConfigError("every lower bound must be < its upper bound")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def is_interior(self, x: np.ndarray) -> bool:
        return bool(np.all(x > self.lower) and np.all(x < self.upper))


@dataclass(frozen=True)
class MinimizeResult:
    x: np.ndarray
    fun: float
    converged: bool
    n_iters: int
    n_evals: int


def _checked_eval(objective, x: np.ndarray) -> float:
    val = float(objective(x))
    if not np.isfinite(val):
        raise NumericalError(
            f"objective returned a non-finite value at probe point "
            f"{np.array2string(x, precision=8)}")
    return val


def numerical_gradient(objective, x: np.ndarray, box: BoxSpec,
                       counter: list | None = None) -> np.ndarray:
    """Central differences with per-coordinate step
    h_k = cbrt(eps) * max(1, |x_k|); probe points are projected into the box,
    so coordinates at a bound degrade to one-sided differences."""
    g = np.empty_like(x)
    for k in range(x.shape[0]):
        h = GRAD_STEP * max(1.0, abs(x[k]))
        hi = min(x[k] + h, box.upper[k])
        lo = max(x[k] - h, box.lower[k])
        if hi == lo:
            g[k] = 0.0
            continue
        xp = x.copy()
        xp[k] = hi
        xm = x.copy()
        xm[k] = lo
        g[k] = (_checked_eval(objective, xp)
                - _checked_eval(objective, xm)) / (hi - lo)
        if counter is not None:
            counter[0] += 2
    return g


def _two_loop(g: np.ndarray, pairs: deque) -> np.ndarray:
    """Standard L-BFGS two-loop recursion for the search direction -H g."""
    d = -g.copy()
    if not pairs:
        return d
    alphas = []
    for s, yv, rho in reversed(pairs):
        a = rho * (s @ d)
        alphas.append(a)
        d -= a * yv
    s, yv, _ = pairs[-1]
    d *= (s @ yv) / (yv @ yv)
    for (s, yv, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (yv @ d)
        d += (a - b) * s
    return d


def minimize_step(objective, x0: np.ndarray, box: BoxSpec,
                  max_iters: int = 1, gtol: float = 1e-8,
                  ftol: float = 1e-12, memory: int = 10,
                  final_grad: bool = True) -> MinimizeResult:
    """Run up to max_iters accepted quasi-Newton steps inside the box.

    Every accepted iterate strictly decreases the objective; when no probe
    along the projected L-BFGS or steepest-descent direction gives a decrease,
    the current point is returned with converged=False unless the projected
    gradient already satisfies gtol.

    final_grad=False skips the gradient of the last accepted iterate, which
    a budget-capped partial update (generalized EM) has no use for; the
    result is then reported converged=False unless ftol triggered first.
    """
    x = np.asarray(x0, dtype=float).copy()
    if box.dim != x.shape[0]:
        raise ConfigError("x0 dimension does not match the box")
    if not box.is_interior(x):
        raise ConfigError("x0 must be strictly interior to the box")
    evals = [0]
    f = _checked_eval(objective, x)
    evals[0] += 1
    g = numerical_gradient(objective, x, box, evals)
    pairs: deque = deque(maxlen=memory)
    n_done = 0

    def projected_grad_norm(xv, gv):
        return float(np.max(np.abs(xv - box.project(xv - gv))))

    for _ in range(max_iters):
        if projected_grad_norm(x, g) <= gtol:
            return MinimizeResult(x, f, True, n_done, evals[0])
        accepted = False
        for direction in (_two_loop(g, pairs), -g):
            step = 1.0
            for _ in range(MAX_HALVINGS):
                x_new = box.project(x + step * direction)
                pred = float(g @ (x_new - x))
                if pred >= 0.0:
                    step *= 0.5
                    continue
                f_new = _checked_eval(objective, x_new)
                evals[0] += 1
                if f_new <= f + ARMIJO_C * pred and f_new < f - LINESEARCH_TOL * max(1.0, abs(f)):
                    accepted = True
                    break
                step *= 0.5
            if accepted:
                break
            pairs.clear()  # L-BFGS direction failed; retry with -g
        if not accepted:
            return MinimizeResult(x, f, False, n_done, evals[0])
        n_done += 1
        if abs(f - f_new) <= ftol * max(1.0, abs(f)):
            return MinimizeResult(x_new, f_new, True, n_done, evals[0])
        if n_done == max_iters and not final_grad:
            return MinimizeResult(x_new, f_new, False, n_done, evals[0])
        g_new = numerical_gradient(objective, x_new, box, evals)
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv) + 1e-300):
            pairs.append((s, yv, 1.0 / sy))
        else:
            # non-positive measured curvature: the stored quadratic model is
            # invalid here and keeping it can freeze the iteration, so drop
            # it and let the next step rebuild from steepest descent
            pairs.clear()
        x, f, g = x_new, f_new, g_new
    converged = projected_grad_norm(x, g) <= gtol
    return MinimizeResult(x, f, converged, n_done, evals[0])
