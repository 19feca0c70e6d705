"""Compiled inner loops: coefficient propagation, weighted policy
negative log-likelihood, and scaled forward-backward recursions.

All callers pass C-contiguous float64/int64 arrays. Hidden-state index 0 is
the lapse state, index 1 the engaged state, throughout.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def propagate_q_batch(phi_all, phi_chosen, rewards, delta1, beta):
    """Q values phi(a, s_it)' delta_i^t for every subject, trial, action.

    delta evolves by the prediction-error update using the chosen action's
    features; the trial-t Q row is evaluated before that trial's update.
    """
    n, T, D, p = phi_all.shape
    qvals = np.empty((n, T, D))
    for i in range(n):
        delta = delta1.copy()
        for t in range(T):
            for a in range(D):
                acc = 0.0
                for k in range(p):
                    acc += phi_all[i, t, a, k] * delta[k]
                qvals[i, t, a] = acc
            pred = 0.0
            for k in range(p):
                pred += phi_chosen[i, t, k] * delta[k]
            err = rewards[i, t] - pred
            for k in range(p):
                delta[k] += beta * phi_chosen[i, t, k] * err
    return qvals


@njit(cache=True)
def propagate_deltas(phi_chosen, rewards, delta1, beta):
    """Coefficient trajectory delta^1 .. delta^{T+1} for one session."""
    T, p = phi_chosen.shape
    deltas = np.empty((T + 1, p))
    for k in range(p):
        deltas[0, k] = delta1[k]
    for t in range(T):
        pred = 0.0
        for k in range(p):
            pred += phi_chosen[t, k] * deltas[t, k]
        err = rewards[t] - pred
        for k in range(p):
            deltas[t + 1, k] = deltas[t, k] + beta * phi_chosen[t, k] * err
    return deltas


@njit(cache=True)
def weighted_policy_nll(phi_all, phi_chosen, actions, rewards, weights,
                        beta, rho, nu_full, delta1):
    """Sum of weights[i,t] * (-log softmax probability of the chosen action).

    Logits are nu_a + rho * Q with Q re-propagated from delta1 under beta,
    so the value is exact for any candidate (beta, rho, nu, delta1).
    """
    n, T, D, p = phi_all.shape
    total = 0.0
    if D == 2:
        # two-action softmax reduces to one logistic term per trial
        for i in range(n):
            delta = delta1.copy()
            for t in range(T):
                q0 = 0.0
                q1 = 0.0
                for k in range(p):
                    q0 += phi_all[i, t, 0, k] * delta[k]
                    q1 += phi_all[i, t, 1, k] * delta[k]
                l0 = nu_full[0] + rho * q0
                l1 = nu_full[1] + rho * q1
                d = l0 - l1 if actions[i, t] == 1 else l1 - l0
                if d > 0.0:
                    nll = d + np.log1p(np.exp(-d))
                else:
                    nll = np.log1p(np.exp(d))
                total += weights[i, t] * nll
                pred = 0.0
                for k in range(p):
                    pred += phi_chosen[i, t, k] * delta[k]
                err = rewards[i, t] - pred
                for k in range(p):
                    delta[k] += beta * phi_chosen[i, t, k] * err
        return total
    logits = np.empty(D)
    for i in range(n):
        delta = delta1.copy()
        for t in range(T):
            m = -np.inf
            for a in range(D):
                acc = 0.0
                for k in range(p):
                    acc += phi_all[i, t, a, k] * delta[k]
                logits[a] = nu_full[a] + rho * acc
                if logits[a] > m:
                    m = logits[a]
            sumexp = 0.0
            for a in range(D):
                sumexp += np.exp(logits[a] - m)
            total += weights[i, t] * (m + np.log(sumexp)
                                      - logits[actions[i, t]])
            pred = 0.0
            for k in range(p):
                pred += phi_chosen[i, t, k] * delta[k]
            err = rewards[i, t] - pred
            for k in range(p):
                delta[k] += beta * phi_chosen[i, t, k] * err
    return total


@njit(cache=True)
def _forward_diff(buf, q, order):
    """In place: buf[:q-order] = diff(buf[:q], n=order)."""
    k = q
    for _ in range(order):
        for i in range(k - 1):
            buf[i] = buf[i + 1] - buf[i]
        k -= 1


@njit(cache=True)
def _adjoint_expand(adj, m, order):
    """In place: adj[:m+order] = (-diff with zero padding)^order of adj[:m],
    the adjoint of the repeated first difference."""
    cur = m
    for _ in range(order):
        adj[cur] = adj[cur - 1]
        for i in range(cur - 1, 0, -1):
            adj[i] = adj[i - 1] - adj[i]
        adj[0] = -adj[0]
        cur += 1


@njit(cache=True)
def _chol_banded_solve(ab, rhs, x):
    """Solve L L' x = rhs with lower Cholesky bands ab[d, j] = L[j+d, j]."""
    bw, q = ab.shape
    for j in range(q):
        s = rhs[j]
        lo = j - bw + 1
        if lo < 0:
            lo = 0
        for i in range(lo, j):
            s -= ab[j - i, i] * x[i]
        x[j] = s / ab[0, j]
    for j in range(q - 1, -1, -1):
        s = x[j]
        hi = j + bw
        if hi > q:
            hi = q
        for i in range(j + 1, hi):
            s -= ab[i - j, j] * x[i]
        x[j] = s / ab[0, j]


@njit(cache=True)
def admm_weighted_fused(y, w, order, ab, tau, lam, relax, max_iters,
                        gap_tol, res_tol, z, u):
    """One over-relaxed ADMM run at fixed tau for
    min 0.5||y - x||^2 + lam ||diff(w x, order)||_1.

    ab holds the lower Cholesky bands of I + tau D'D. z and u are updated
    in place so a restart at a new tau continues from the current dual
    state. Returns (x, v, gap, iters, status): status 1 means the duality
    gap target was met, 2 a residual stall below res_tol with the gap still
    open, 0 the iteration cap.
    """
    q = y.shape[0]
    m = q - order
    x = np.empty(q)
    rhs = np.empty(q)
    adj = np.empty(q)
    buf = np.empty(q)
    Dx = np.empty(m)
    Dy = np.empty(m)
    v = np.empty(m)
    vc = np.empty(m)
    dz = np.empty(m)
    for i in range(q):
        buf[i] = w[i] * y[i]
    _forward_diff(buf, q, order)
    for i in range(m):
        Dy[i] = buf[i]

    gap = np.inf
    status = 0
    iters = 0
    for it in range(max_iters):
        iters = it + 1
        for i in range(m):
            adj[i] = z[i] - u[i]
        _adjoint_expand(adj, m, order)
        for i in range(q):
            rhs[i] = y[i] + tau * w[i] * adj[i]
        _chol_banded_solve(ab, rhs, x)
        for i in range(q):
            buf[i] = w[i] * x[i]
        _forward_diff(buf, q, order)
        pen = 0.0
        for i in range(m):
            Dx[i] = buf[i]
            vi = tau * (Dx[i] - z[i] + u[i])
            v[i] = vi
            if vi > lam:
                vi = lam
            elif vi < -lam:
                vi = -lam
            vc[i] = vi
            pen += abs(Dx[i])
        quad = 0.0
        for i in range(q):
            d = y[i] - x[i]
            quad += d * d
        primal = 0.5 * quad + lam * pen
        dot1 = 0.0
        for i in range(m):
            adj[i] = vc[i]
            dot1 += vc[i] * Dy[i]
        _adjoint_expand(adj, m, order)
        nrm = 0.0
        for i in range(q):
            a2 = w[i] * adj[i]
            nrm += a2 * a2
        gap = primal - (dot1 - 0.5 * nrm)
        if gap <= gap_tol:
            status = 1
            break
        thresh = lam / tau
        for i in range(m):
            zr = relax * Dx[i] + (1.0 - relax) * z[i]
            zold = z[i]
            t2 = zr + u[i]
            if t2 > thresh:
                zn = t2 - thresh
            elif t2 < -thresh:
                zn = t2 + thresh
            else:
                zn = 0.0
            z[i] = zn
            u[i] = t2 - zn
            dz[i] = zn - zold
        rp = 0.0
        for i in range(m):
            d = Dx[i] - z[i]
            rp += d * d
            adj[i] = dz[i]
        _adjoint_expand(adj, m, order)
        rd = 0.0
        for i in range(q):
            a2 = tau * w[i] * adj[i]
            rd += a2 * a2
        if np.sqrt(rp) <= res_tol and np.sqrt(rd) <= res_tol:
            status = 2
            break
    return x, v, gap, iters, status


@njit(cache=True)
def forward_backward_kernel(eta, pi1, c01, c11):
    """Scaled forward-backward for the two-state chain, batched over subjects.

    eta: (n, T, 2) strictly positive emission probabilities.
    c01[t], c11[t]: P(U_{t+2}=1 | U_{t+1}=j) for the 0-based transition
    index t = 0 .. T-2.
    Returns gamma (n, T, 2), xi (n, T-1, 2, 2), loglik (n,), scales (n, T);
    loglik is the sum of log scale factors, equal to the unscaled
    log sum_j a_{ijT}.
    """
    n, T = eta.shape[0], eta.shape[1]
    gamma = np.empty((n, T, 2))
    xi = np.empty((n, T - 1, 2, 2))
    loglik = np.empty(n)
    scales = np.empty((n, T))
    ahat = np.empty((T, 2))
    bhat = np.empty((T, 2))
    for i in range(n):
        a0 = (1.0 - pi1) * eta[i, 0, 0]
        a1 = pi1 * eta[i, 0, 1]
        s = a0 + a1
        scales[i, 0] = s
        ahat[0, 0] = a0 / s
        ahat[0, 1] = a1 / s
        for t in range(1, T):
            m0 = ahat[t - 1, 0] * (1.0 - c01[t - 1]) \
                + ahat[t - 1, 1] * (1.0 - c11[t - 1])
            m1 = ahat[t - 1, 0] * c01[t - 1] + ahat[t - 1, 1] * c11[t - 1]
            a0 = m0 * eta[i, t, 0]
            a1 = m1 * eta[i, t, 1]
            s = a0 + a1
            scales[i, t] = s
            ahat[t, 0] = a0 / s
            ahat[t, 1] = a1 / s
        bhat[T - 1, 0] = 1.0
        bhat[T - 1, 1] = 1.0
        for t in range(T - 2, -1, -1):
            e0 = eta[i, t + 1, 0] * bhat[t + 1, 0]
            e1 = eta[i, t + 1, 1] * bhat[t + 1, 1]
            bhat[t, 0] = ((1.0 - c01[t]) * e0 + c01[t] * e1) / scales[i, t + 1]
            bhat[t, 1] = ((1.0 - c11[t]) * e0 + c11[t] * e1) / scales[i, t + 1]
        ll = 0.0
        for t in range(T):
            gamma[i, t, 0] = ahat[t, 0] * bhat[t, 0]
            gamma[i, t, 1] = ahat[t, 1] * bhat[t, 1]
            ll += np.log(scales[i, t])
        loglik[i] = ll
        for t in range(T - 1):
            e0 = eta[i, t + 1, 0] * bhat[t + 1, 0] / scales[i, t + 1]
            e1 = eta[i, t + 1, 1] * bhat[t + 1, 1] / scales[i, t + 1]
            xi[i, t, 0, 0] = ahat[t, 0] * (1.0 - c01[t]) * e0
            xi[i, t, 0, 1] = ahat[t, 0] * c01[t] * e1
            xi[i, t, 1, 0] = ahat[t, 1] * (1.0 - c11[t]) * e0
            xi[i, t, 1, 1] = ahat[t, 1] * c11[t] * e1
    return gamma, xi, loglik, scales
