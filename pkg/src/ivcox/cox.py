"""Cox partial likelihood with per-subject offsets, Breslow jumps, and probit MLE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .errors import MonotoneLikelihoodDivergence, Separation, SingularHessian
from .model import BaselineHazard
from .rng import inverse_mills

DIVERGENCE_LIMIT = 50.0
MAX_HALVINGS = 30
# Fits ending beyond this are checked for a monotone likelihood; Newton stalls
# around |beta| ~ 20 there because the gradient underflows.
SUSPECT_COEF = 10.0


@dataclass(frozen=True, eq=False)
class RiskSetIndex:
    """Subjects sorted by time (events before censored at equal times).

    In sorted position ``k`` the risk set is every position ``>= k``, so
    risk-set sums are reverse cumulative sums.
    """

    order: np.ndarray
    time: np.ndarray
    event: np.ndarray

    @classmethod
    def build(cls, times, events) -> "RiskSetIndex":
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=bool)
        order = np.lexsort((~events, times))
        return cls(order, times[order], events[order])

    @property
    def event_positions(self) -> np.ndarray:
        return np.flatnonzero(self.event)


def _rev_cumsum(a):
    return np.cumsum(a[::-1], axis=0)[::-1]


def _risk_sums(beta, X, offset, rs: RiskSetIndex, second=True):
    Xs = X[rs.order]
    lp = Xs @ beta + offset[rs.order]
    c = lp.max()
    r = np.exp(lp - c)
    s0 = _rev_cumsum(r)
    s1 = _rev_cumsum(r[:, None] * Xs)
    s2 = _rev_cumsum(r[:, None, None] * Xs[:, :, None] * Xs[:, None, :]) if second else None
    return Xs, s0, s1, s2, c


def cox_profile_loglik(beta, Xt, times, events, offset=None, risk_index: RiskSetIndex | None = None):
    """Profile (partial) log-likelihood with offsets, its gradient and Hessian.

    ``value = sum_{events i} [x_i'beta - log sum_{j: t_j >= t_i} exp(x_j'beta + offset_j)]``.
    """
    Xt = np.asarray(Xt, dtype=float)
    beta = np.asarray(beta, dtype=float)
    offset = np.zeros(Xt.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    rs = risk_index or RiskSetIndex.build(times, events)
    Xs, s0, s1, s2, c = _risk_sums(beta, Xt, offset, rs)
    ev = rs.event
    xbar = s1[ev] / s0[ev, None]
    value = float(np.sum(Xs[ev] @ beta) - np.sum(np.log(s0[ev]) + c))
    grad = (Xs[ev] - xbar).sum(axis=0)
    hess = -(s2[ev] / s0[ev, None, None] - xbar[:, :, None] * xbar[:, None, :]).sum(axis=0)
    return value, grad, hess


@dataclass(frozen=True)
class NewtonFit:
    coef: np.ndarray
    loglik: float
    iterations: int
    converged: bool


def _newton_step(grad, hess):
    neg = -hess
    k = neg.shape[0]
    for ridge in (0.0, 1e-8):
        try:
            step = np.linalg.solve(neg + ridge * np.eye(k), grad)
        except np.linalg.LinAlgError:
            continue
        if np.isfinite(step).all():
            return step
    raise SingularHessian("Hessian is singular even after a 1e-8 ridge")


def newton_maximize(fun, x0, tol=1e-8, max_iter=50, limit=DIVERGENCE_LIMIT, on_diverge=None):
    """Newton-Raphson ascent with step-halving for concave objectives.

    ``fun(x)`` returns ``(value, grad, hess)``. Stops when ``max|grad| < tol``.
    """
    x = np.array(x0, dtype=float)
    value, grad, hess = fun(x)
    it = 0
    while it < max_iter:
        if np.max(np.abs(grad), initial=0.0) < tol:
            return NewtonFit(x, value, it, True)
        step = _newton_step(grad, hess)
        for _ in range(MAX_HALVINGS + 1):
            cand = x + step
            cv, cg, ch = fun(cand)
            if np.isfinite(cv) and cv >= value - 1e-12 * max(1.0, abs(value)):
                break
            step = step / 2
        else:
            # No ascent available: treat as converged to working precision.
            return NewtonFit(x, value, it, bool(np.max(np.abs(grad)) < np.sqrt(tol)))
        x, value, grad, hess = cand, cv, cg, ch
        it += 1
        if np.max(np.abs(x), initial=0.0) > limit:
            raise (on_diverge or ValueError)(f"coefficients exceed {limit} in magnitude: {x}")
    return NewtonFit(x, value, it, bool(np.max(np.abs(grad), initial=0.0) < tol))


def fit_cox(Xt, times, events, offset=None, init=None, tol=1e-8, max_iter=50,
            risk_index: RiskSetIndex | None = None) -> NewtonFit:
    """Maximise the offset partial likelihood by Newton-Raphson from ``init`` (default 0)."""
    Xt = np.asarray(Xt, dtype=float)
    rs = risk_index or RiskSetIndex.build(times, events)
    offset = np.zeros(Xt.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    x0 = np.zeros(Xt.shape[1]) if init is None else init
    fit = newton_maximize(
        lambda b: cox_profile_loglik(b, Xt, None, None, offset, risk_index=rs),
        x0, tol=tol, max_iter=max_iter, on_diverge=MonotoneLikelihoodDivergence,
    )
    if np.max(np.abs(fit.coef), initial=0.0) > SUSPECT_COEF and has_monotone_likelihood(Xt, rs):
        raise MonotoneLikelihoodDivergence(f"partial likelihood is monotone; Newton stopped at {fit.coef}")
    return fit


def has_monotone_likelihood(Xt, risk_index: RiskSetIndex) -> bool:
    """True if some direction ``d`` never decreases the partial likelihood.

    That holds when ``(x_j - x_i)'d <= 0`` for every event ``i`` and every
    ``j`` in its risk set, with strict inequality for some pair; the maximum
    partial likelihood estimate is then infinite.
    """
    Xs = np.asarray(Xt, dtype=float)[risk_index.order]
    A = np.vstack([Xs[k:] - Xs[k] for k in risk_index.event_positions])
    A = A[np.any(A != 0, axis=1)]
    if A.size == 0:
        return False
    res = optimize.linprog(A.sum(axis=0), A_ub=A, b_ub=np.zeros(len(A)),
                           bounds=[(-1, 1)] * A.shape[1], method="highs")
    return bool(res.status == 0 and -res.fun > 1e-9 * max(1.0, np.abs(A).sum()))


def breslow_update(beta, Xt, times, events, offset=None,
                   risk_index: RiskSetIndex | None = None) -> BaselineHazard:
    """Breslow jumps ``1 / sum_{j: t_j >= t_i} exp(x_j'beta + offset_j)`` at each event time."""
    Xt = np.asarray(Xt, dtype=float)
    offset = np.zeros(Xt.shape[0]) if offset is None else np.asarray(offset, dtype=float)
    rs = risk_index or RiskSetIndex.build(times, events)
    _, s0, _, _, c = _risk_sums(np.asarray(beta, dtype=float), Xt, offset, rs, second=False)
    ev = rs.event
    return BaselineHazard(rs.time[ev], np.exp(-c) / s0[ev])


# --------------------------------------------------------------------------- probit

def probit_loglik(alpha, Xw, w):
    """Probit log-likelihood with analytic gradient and Hessian."""
    Xw = np.asarray(Xw, dtype=float)
    s = np.where(np.asarray(w, dtype=bool), 1.0, -1.0)
    q = s * (Xw @ np.asarray(alpha, dtype=float))
    lam = inverse_mills(q)
    value = float(special.log_ndtr(q).sum())
    grad = Xw.T @ (s * lam)
    curv = lam * (q + lam)
    hess = -(Xw.T * curv) @ Xw
    return value, grad, hess


def is_separated(Xw, w) -> bool:
    """True if some direction ``a`` has ``s_i x_i'a >= 0`` for all i, strictly for one.

    That is complete or quasi-complete separation, under which the probit
    MLE does not exist.
    """
    Xw = np.asarray(Xw, dtype=float)
    s = np.where(np.asarray(w, dtype=bool), 1.0, -1.0)
    A = s[:, None] * Xw
    q = Xw.shape[1]
    if q == 0:
        return False
    res = optimize.linprog(-A.sum(axis=0), A_ub=-A, b_ub=np.zeros(len(s)),
                           bounds=[(-1, 1)] * q, method="highs")
    return bool(res.status == 0 and -res.fun > 1e-9 * max(1.0, np.abs(A).sum()))


def fit_probit(Xw, w, init=None, tol=1e-8, max_iter=100) -> NewtonFit:
    """Probit MLE by Newton-Raphson with step-halving.

    Raises :class:`Separation` if the data are separated or coefficients
    exceed the divergence limit.
    """
    Xw = np.asarray(Xw, dtype=float)
    if is_separated(Xw, w):
        raise Separation("treatment is (quasi-)completely separated by the treatment design")
    x0 = np.zeros(Xw.shape[1]) if init is None else init
    return newton_maximize(lambda a: probit_loglik(a, Xw, w), x0, tol=tol, max_iter=max_iter,
                           on_diverge=Separation)
