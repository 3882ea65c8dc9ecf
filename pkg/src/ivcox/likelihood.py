"""Frailty Cox kernel, probit treatment weights and Monte Carlo posterior moments.

The latent pair is ``(V, U) ~ N2(0, [[1, rho*sigma_u], [rho*sigma_u, sigma_u**2]])``
with ``W = 1{x_w'alpha + V >= 0}`` and hazard ``lambda0(t) exp(x_t'beta + U)``.
Given ``U = u``, ``V ~ N(rho*u/sigma_u, 1 - rho**2)``, so

    P(W = 1 | u) = Phi((x_w'alpha + rho*u/sigma_u) / sqrt(1 - rho**2)).

All weight arithmetic is done on the log scale with per-subject max subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .errors import BaselineNotCovering, DegenerateWeights
from .model import BaselineHazard, Dataset, DesignSpec, ModelMatrices, ParameterSet
from .rng import log_std_normal_cdf, std_normal_cdf

LOG_2PI = np.log(2 * np.pi)


def _normal_logpdf(u, sd):
    return -0.5 * (u / sd) ** 2 - np.log(sd) - 0.5 * LOG_2PI


def cox_kernel(t, event, xt, u, beta, baseline: BaselineHazard):
    """Log density (event) or log survival (censored) of the frailty Cox model.

    Returns ``event*(log Lambda{t} + x_t'beta + u) - Lambda(t) exp(x_t'beta + u)``
    where ``Lambda{t}`` is the baseline jump at ``t``.
    """
    eta = np.asarray(xt, dtype=float) @ np.asarray(beta, dtype=float) + u
    cum = baseline.cumulative(t)
    out = -cum * np.exp(eta)
    event = np.asarray(event, dtype=bool)
    if np.any(event):
        jump = np.asarray(baseline.jump_at(t))
        if np.any(event & (jump <= 0)):
            raise BaselineNotCovering(f"no baseline jump at event time(s) {np.asarray(t)[event & (jump <= 0)]}")
        out = out + np.where(event, np.log(np.where(event, jump, 1.0)) + eta, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def _treatment_index(lin_w, u, rho, sigma_u):
    return (lin_w + (rho / sigma_u) * u) / np.sqrt(1.0 - rho * rho)


def treatment_weight(w, xw, u, alpha, rho, sigma_u=1.0):
    """P(W = w | U = u, x_w) under the probit treatment model."""
    a = _treatment_index(np.asarray(xw, dtype=float) @ np.asarray(alpha, dtype=float), u, rho, sigma_u)
    p = std_normal_cdf(a)
    return np.where(w, p, std_normal_cdf(-a)) if np.ndim(p) else float(p if w else std_normal_cdf(-a))


def log_treatment_weight(w, xw, u, alpha, rho, sigma_u=1.0):
    a = _treatment_index(np.asarray(xw, dtype=float) @ np.asarray(alpha, dtype=float), u, rho, sigma_u)
    out = log_std_normal_cdf(np.where(w, a, -a))
    return float(out) if np.ndim(out) == 0 else out


def closed_form_frailty_treatment_integral(lin_w, rho, sigma_u, w):
    """E[e^U ; W = w] = integral of e^u times the w-side mass of the latent pair.

    Closed form: ``exp(sigma_u**2/2) * Phi(lin_w + sigma_u*rho)`` for ``w=1``
    and the complementary probability for ``w=0``.
    """
    a = np.asarray(lin_w, dtype=float) + sigma_u * rho
    prob = np.where(w, std_normal_cdf(a), std_normal_cdf(-a))
    out = np.exp(0.5 * sigma_u**2) * prob
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------- posterior weights

def frailty_log_weights(event, eta, cumhaz, treatment, lin_w, draws, rho, sigma_u):
    """Unnormalised log importance weights, shape ``(n, B)``.

    ``log w_ib = event_i*(eta_i + u_ib) - Lambda(t_i) exp(eta_i + u_ib) + log P(W=w_i | u_ib)``.
    The baseline jump and any censoring factors are constant in ``u`` and
    cancel after normalisation, so they are omitted.
    """
    draws = np.asarray(draws, dtype=float)
    s = np.asarray(eta, dtype=float)[:, None] + draws
    lw = np.where(np.asarray(event, bool)[:, None], s, 0.0) - np.asarray(cumhaz, float)[:, None] * np.exp(s)
    a = _treatment_index(np.asarray(lin_w, dtype=float)[:, None], draws, rho, sigma_u)
    lw += special.log_ndtr(np.where(np.asarray(treatment, bool)[:, None], a, -a))
    return lw


@dataclass(frozen=True, eq=False)
class PosteriorMoments:
    """Per-subject Monte Carlo posterior summaries of the frailty.

    ``weights`` are self-normalised (rows sum to one); ``log_mean_weight`` is
    ``log((1/B) sum_b exp(log w_ib))`` for the unnormalised weights, which is
    the per-subject Monte Carlo marginal likelihood up to the jump term.
    """

    draws: np.ndarray
    weights: np.ndarray
    log_mean_weight: np.ndarray
    e_u: np.ndarray
    e_expu: np.ndarray
    e_u2: np.ndarray

    @classmethod
    def from_log_weights(cls, draws, log_w) -> "PosteriorMoments":
        draws = np.asarray(draws, dtype=float)
        m = log_w.max(axis=1, keepdims=True)
        if not np.isfinite(m).all():
            bad = int(np.flatnonzero(~np.isfinite(m[:, 0]))[0])
            raise DegenerateWeights("all importance weights underflow", subject=bad)
        e = np.exp(log_w - m)
        total = e.sum(axis=1, keepdims=True)
        weights = e / total
        log_mean = m[:, 0] + np.log(total[:, 0]) - np.log(draws.shape[1])
        e_u = (weights * draws).sum(axis=1)
        e_expu = (weights * np.exp(draws)).sum(axis=1)
        e_u2 = (weights * draws * draws).sum(axis=1)
        return cls(draws, weights, log_mean, e_u, e_expu, e_u2)

    @property
    def n(self) -> int:
        return self.draws.shape[0]

    def expect(self, G: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return (self.weights * G(self.draws)).sum(axis=1)


def _subject_arrays(time, event, treatment, xt, xw, params, baseline):
    eta = np.atleast_1d(np.asarray(xt, dtype=float) @ params.beta)
    lin_w = np.atleast_1d(np.asarray(xw, dtype=float) @ params.alpha)
    cumhaz = np.atleast_1d(baseline.cumulative(np.asarray(time, dtype=float)))
    return (np.atleast_1d(np.asarray(event, bool)), eta, cumhaz,
            np.atleast_1d(np.asarray(treatment, bool)), lin_w)


def posterior_expectation(G, *, time, event, treatment, xt, xw,
                          params: ParameterSet, baseline: BaselineHazard, draws,
                          return_se: bool = False):
    """Self-normalised Monte Carlo estimate of E[G(U) | t, event, w, z, x] for one subject.

    ``draws`` are ``u_1..u_B`` from ``N(0, sigma_u**2)``. With ``return_se`` the
    delta-method Monte Carlo standard error is returned as well.
    """
    draws = np.atleast_1d(np.asarray(draws, dtype=float))[None, :]
    args = _subject_arrays(time, event, treatment, xt, xw, params, baseline)
    log_w = frailty_log_weights(*args, draws, params.rho, params.sigma_u)
    m = log_w.max()
    if not np.isfinite(m):
        raise DegenerateWeights("all importance weights underflow")
    w = np.exp(log_w[0] - m)
    w /= w.sum()
    g = np.broadcast_to(np.asarray(G(draws[0]), dtype=float), w.shape)
    est = float(np.dot(w, g))
    if return_se:
        return est, float(np.sqrt(np.sum(w * w * (g - est) ** 2)))
    return est


def posterior_moments(mm: ModelMatrices, params: ParameterSet, baseline: BaselineHazard,
                      draws) -> PosteriorMoments:
    """Vectorised posterior moments for every subject; ``draws`` has shape ``(n, B)``."""
    eta = mm.Xt @ params.beta
    lin_w = mm.Xw @ params.alpha
    cumhaz = baseline.cumulative(mm.time)
    log_w = frailty_log_weights(mm.event, eta, cumhaz, mm.treatment, lin_w, draws,
                                params.rho, params.sigma_u)
    return PosteriorMoments.from_log_weights(draws, log_w)


def _as_matrices(dataset, design) -> ModelMatrices:
    if isinstance(dataset, ModelMatrices):
        return dataset
    return ModelMatrices.build(dataset, design or DesignSpec.default(dataset.p, dataset.K))


def complete_data_loglik(dataset: Dataset, params: ParameterSet, baseline: BaselineHazard,
                         u, design: DesignSpec | None = None) -> float:
    """Complete-data log-likelihood given one frailty value per subject.

    Sum of the Cox kernel terms plus, per subject, the log of the joint
    (treatment side, frailty) density ``P(W=w_i | u_i) * phi(u_i; sigma_u)``.
    """
    mm = _as_matrices(dataset, design)
    u = np.asarray(u, dtype=float)
    cox = cox_kernel(mm.time, mm.event, mm.Xt, u, params.beta, baseline)
    trt = log_treatment_weight(mm.treatment, mm.Xw, u, params.alpha, params.rho, params.sigma_u)
    return float(np.sum(cox) + np.sum(trt) + np.sum(_normal_logpdf(u, params.sigma_u)))


def _event_jump_term(mm: ModelMatrices, baseline: BaselineHazard) -> float:
    if not mm.event.any():
        return 0.0
    jumps = np.asarray(baseline.jump_at(mm.time[mm.event]))
    if (jumps <= 0).any():
        raise BaselineNotCovering("baseline has no jump at some event time")
    return float(np.log(jumps).sum())


def observed_loglik_mc(dataset, params: ParameterSet, baseline: BaselineHazard, draws,
                       design: DesignSpec | None = None, proposal_sd: float | None = None) -> float:
    """Monte Carlo observed-data log-likelihood.

    ``sum_i log((1/B) sum_b exp(l_i(u_ib) - log q(u_ib)))`` where ``l_i`` is the
    subject's complete-data contribution and ``q`` the ``N(0, proposal_sd**2)``
    sampling density (default ``params.sigma_u``, in which case the frailty
    density cancels).
    """
    mm = _as_matrices(dataset, design)
    draws = np.asarray(draws, dtype=float)
    if draws.ndim == 1:
        draws = draws[:, None]
    eta = mm.Xt @ params.beta
    lin_w = mm.Xw @ params.alpha
    cumhaz = baseline.cumulative(mm.time)
    log_w = frailty_log_weights(mm.event, eta, cumhaz, mm.treatment, lin_w, draws,
                                params.rho, params.sigma_u)
    if proposal_sd is not None and proposal_sd != params.sigma_u:
        log_w = log_w + _normal_logpdf(draws, params.sigma_u) - _normal_logpdf(draws, proposal_sd)
    per_subject = special.logsumexp(log_w, axis=1) - np.log(draws.shape[1])
    if not np.isfinite(per_subject).all():
        raise DegenerateWeights("observed log-likelihood is not finite",
                                subject=int(np.flatnonzero(~np.isfinite(per_subject))[0]))
    return float(per_subject.sum() + _event_jump_term(mm, baseline))
