"""Monte Carlo EM for the instrumental-variable frailty Cox model.

Each iteration draws (or reuses) ``B`` frailty values per subject from the
current ``N(0, sigma_u**2)`` prior, weights them by the subject's Cox and
probit likelihood contributions, then

* refits ``beta`` by partial likelihood with offsets ``log E[e^U | data]`` and
  recomputes the Breslow jumps (Cox block), and
* refits ``(alpha, rho)`` by maximising the weighted probit objective
  ``sum_i sum_b w_ib log P(W = w_i | u_ib)`` (treatment block).
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .cox import RiskSetIndex, breslow_update, fit_cox, fit_probit
from .errors import FitError, NonConvergence, TooManyFailures
from .likelihood import PosteriorMoments, frailty_log_weights
from .model import (
    RHO_CAP,
    BaselineHazard,
    Dataset,
    DesignSpec,
    FitResult,
    ModelMatrices,
    ParameterSet,
    validate_identification,
)
from .rng import SeededStream

log = logging.getLogger(__name__)

ETA_CAP = float(np.arctanh(RHO_CAP))
_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


@dataclass(frozen=True)
class EMConfig:
    B: int = 100
    epsilon: float = 1e-3
    max_iter: int = 200
    frozen_draws: bool = True
    estimate_sigma_u: bool = False
    sigma_u: float = 1.0
    fixed_rho: float | None = None
    seed: int = 0
    inner_tol: float = 1e-8
    inner_max_iter: int = 200

    def __post_init__(self):
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.sigma_u > 0:
            raise ValueError("sigma_u must be > 0")
        if self.fixed_rho is not None and abs(self.fixed_rho) > RHO_CAP:
            raise ValueError(f"|fixed_rho| must be <= {RHO_CAP}")


@dataclass(frozen=True, eq=False)
class EMState:
    k: int
    params: ParameterSet
    baseline: BaselineHazard
    moments: PosteriorMoments | None = None
    obs_loglik: float | None = None


@dataclass(frozen=True, eq=False)
class _Problem:
    mm: ModelMatrices
    risk: RiskSetIndex
    keys: np.ndarray
    design: DesignSpec


def _subject_keys(dataset: Dataset) -> np.ndarray:
    """64-bit content hash per subject, so draws follow the subject, not its row."""
    keys = np.empty(dataset.n, dtype=np.uint64)
    for i in range(dataset.n):
        h = hashlib.blake2b(digest_size=8)
        h.update(np.float64(dataset.time[i]).tobytes())
        h.update(bytes([int(dataset.event[i]), int(dataset.treatment[i])]))
        h.update(np.ascontiguousarray(dataset.X[i], dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(dataset.Z[i], dtype=np.float64).tobytes())
        keys[i] = np.frombuffer(h.digest(), dtype=np.uint64)[0]
    return keys


def _prepare(dataset: Dataset, design: DesignSpec | None) -> _Problem:
    design = design or DesignSpec.default(dataset.p, dataset.K)
    mm = ModelMatrices.build(dataset, design)
    return _Problem(mm, RiskSetIndex.build(mm.time, mm.event), _subject_keys(dataset), design)


def standard_draws(keys, B: int, seed: int, iteration: int | None = None) -> np.ndarray:
    """Standard normal draws, one row per subject stream; ``iteration=None`` means frozen."""
    out = np.empty((len(keys), B))
    for i, key in enumerate(keys):
        sid = (int(key),) if iteration is None else (int(key), iteration)
        out[i] = SeededStream(seed, sid).generator().standard_normal(B)
    return out


# --------------------------------------------------------------------------- steps

def initialize(dataset: Dataset, design: DesignSpec | None = None,
               config: EMConfig | None = None, _problem: _Problem | None = None) -> EMState:
    """Starting values: ordinary Cox for beta, probit for alpha, rho=0 (or the fixed value)."""
    config = config or EMConfig()
    prob = _problem or _prepare(dataset, design)
    validate_identification(prob.design, config)
    mm = prob.mm
    beta0 = fit_cox(mm.Xt, mm.time, mm.event, risk_index=prob.risk).coef
    alpha0 = fit_probit(mm.Xw, mm.treatment).coef
    rho0 = 0.0 if config.fixed_rho is None else config.fixed_rho
    params = ParameterSet(alpha0, beta0, rho0, config.sigma_u)
    baseline = breslow_update(beta0, mm.Xt, mm.time, mm.event, risk_index=prob.risk)
    return EMState(0, params, baseline)


def e_step(state: EMState, dataset: Dataset, config: EMConfig, design: DesignSpec | None = None,
           z: np.ndarray | None = None, _problem: _Problem | None = None) -> PosteriorMoments:
    """Posterior frailty moments at the current parameters.

    ``z`` are standard normal draws of shape ``(n, B)`` (scaled by sigma_u
    here); when omitted they come from the per-subject streams.
    """
    prob = _problem or _prepare(dataset, design)
    if z is None:
        z = standard_draws(prob.keys, config.B, config.seed,
                           None if config.frozen_draws else state.k)
    p = state.params
    mm = prob.mm
    draws = p.sigma_u * z
    log_w = frailty_log_weights(mm.event, mm.Xt @ p.beta, state.baseline.cumulative(mm.time),
                                mm.treatment, mm.Xw @ p.alpha, draws, p.rho, p.sigma_u)
    return PosteriorMoments.from_log_weights(draws, log_w)


def _mc_observed_loglik(moments: PosteriorMoments, mm: ModelMatrices, baseline: BaselineHazard) -> float:
    jumps = baseline.jump_at(mm.time[mm.event]) if mm.event.any() else np.zeros(0)
    return float(moments.log_mean_weight.sum() + np.log(jumps).sum())


def m_step_cox(moments: PosteriorMoments, dataset: Dataset, design: DesignSpec | None = None,
               init=None, _problem: _Problem | None = None) -> tuple[np.ndarray, BaselineHazard]:
    """Cox block: partial likelihood with offsets ``log E[e^U]``, then Breslow jumps."""
    prob = _problem or _prepare(dataset, design)
    mm = prob.mm
    offset = np.log(moments.e_expu)
    fit = fit_cox(mm.Xt, mm.time, mm.event, offset, init=init, risk_index=prob.risk)
    return fit.coef, breslow_update(fit.coef, mm.Xt, mm.time, mm.event, offset, risk_index=prob.risk)


def cox_block_objective(beta, baseline: BaselineHazard, moments: PosteriorMoments,
                        mm: ModelMatrices) -> float:
    """Expected complete-data Cox block at ``(beta, jumps)`` given frozen moments."""
    eta = mm.Xt @ np.asarray(beta, dtype=float)
    ev = mm.event
    jumps = baseline.jump_at(mm.time[ev])
    return float(np.sum(np.log(jumps) + eta[ev] + moments.e_u[ev])
                 - np.sum(baseline.cumulative(mm.time) * np.exp(eta) * moments.e_expu))


def treatment_block_objective(alpha, rho, moments: PosteriorMoments, mm: ModelMatrices,
                              sigma_u: float = 1.0) -> float:
    """``sum_i sum_b w_ib log P(W = w_i | u_ib)`` for candidate ``(alpha, rho)``."""
    lin = mm.Xw @ np.asarray(alpha, dtype=float)
    a = (lin[:, None] + (rho / sigma_u) * moments.draws) / np.sqrt(1 - rho * rho)
    s = np.where(mm.treatment, 1.0, -1.0)[:, None]
    return float(np.sum(moments.weights * special.log_ndtr(s * a)))


def _treatment_derivs(theta, Xw, s, u, wts, free_rho: bool, eta_fixed: float):
    """Value, gradient and Hessian of the treatment block in ``(alpha, eta)``, rho = tanh(eta)."""
    q_dim = Xw.shape[1]
    alpha = theta[:q_dim]
    eta = theta[q_dim] if free_rho else eta_fixed
    ch, sh = np.cosh(eta), np.sinh(eta)
    lin = Xw @ alpha
    a = sh * u
    a += (ch * lin)[:, None]
    q = s * a
    logcdf = special.log_ndtr(q)
    value = float(np.sum(wts * logcdf))
    # inverse Mills ratio phi(q)/Phi(q) and d2 log Phi / dq2 = -lam (q + lam)
    lam = q * q
    lam *= -0.5
    lam -= logcdf
    lam -= _HALF_LOG_2PI
    np.exp(lam, out=lam)
    wl = wts * lam
    curv = q + lam
    curv *= wl
    wc = -curv                    # weight * d2 log Phi / da2
    wl *= s                       # weight * d log Phi / da
    g_alpha = ch * (Xw.T @ wl.sum(axis=1))
    h_aa = ch * ch * (Xw.T * wc.sum(axis=1)) @ Xw
    if not free_rho:
        return value, g_alpha, h_aa
    d_eta = sh * lin[:, None] + ch * u
    g_eta = float(np.sum(wl * d_eta))
    h_ae = Xw.T @ (ch * (wc * d_eta).sum(axis=1) + sh * wl.sum(axis=1))
    h_ee = float(np.sum(wc * d_eta * d_eta + wl * a))
    grad = np.append(g_alpha, g_eta)
    hess = np.zeros((q_dim + 1, q_dim + 1))
    hess[:q_dim, :q_dim] = h_aa
    hess[:q_dim, q_dim] = hess[q_dim, :q_dim] = h_ae
    hess[q_dim, q_dim] = h_ee
    return value, grad, hess


def _ascent_direction(grad, hess):
    """Newton direction, Levenberg-damped until the negated Hessian is positive definite."""
    neg = -hess
    k = neg.shape[0]
    mu = 0.0
    scale = max(np.max(np.abs(np.diag(neg))), 1e-12)
    for _ in range(60):
        try:
            c = np.linalg.cholesky(neg + mu * np.eye(k))
            return np.linalg.solve(c.T, np.linalg.solve(c, grad))
        except np.linalg.LinAlgError:
            mu = max(2 * mu, 1e-8 * scale)
    return grad / scale


def m_step_treatment(moments: PosteriorMoments, dataset: Dataset, config: EMConfig,
                     design: DesignSpec | None = None, init: ParameterSet | None = None,
                     _problem: _Problem | None = None) -> tuple[np.ndarray, float, float]:
    """Treatment block: returns ``(alpha, rho, sigma_u)``.

    With ``estimate_sigma_u`` the frailty scale is updated first in closed form,
    ``sigma_u**2 = mean(E[U**2])``. ``(alpha, atanh(rho))`` are then maximised
    by damped Newton with step-halving, starting from ``init``.
    """
    prob = _problem or _prepare(dataset, design)
    mm = prob.mm
    sigma_u = init.sigma_u if init is not None else config.sigma_u
    if config.estimate_sigma_u:
        sigma_u = float(np.sqrt(np.mean(moments.e_u2)))
    free_rho = config.fixed_rho is None
    alpha0 = init.alpha if init is not None else np.zeros(mm.Xw.shape[1])
    rho0 = init.rho if (init is not None and free_rho) else (config.fixed_rho or 0.0)
    eta_fixed = float(np.arctanh(rho0))
    theta = np.append(alpha0, eta_fixed) if free_rho else np.array(alpha0, dtype=float)

    s = np.where(mm.treatment, 1.0, -1.0)[:, None]
    u = moments.draws / sigma_u
    fun = lambda th: _treatment_derivs(th, mm.Xw, s, u, moments.weights, free_rho, eta_fixed)

    value, grad, hess = fun(theta)
    for _ in range(config.inner_max_iter):
        if np.max(np.abs(grad), initial=0.0) < config.inner_tol:
            break
        step = _ascent_direction(grad, hess)
        for _h in range(31):
            cand = theta + step
            if free_rho:
                cand[-1] = np.clip(cand[-1], -ETA_CAP, ETA_CAP)
            cv, cg, ch = fun(cand)
            if np.isfinite(cv) and cv >= value:
                break
            step = step / 2
        else:
            break  # no further ascent at working precision
        moved = np.max(np.abs(cand - theta))
        theta, value, grad, hess = cand, cv, cg, ch
        if moved < 1e-14:
            break
    else:
        raise NonConvergence(f"treatment block did not converge in {config.inner_max_iter} iterations")

    q_dim = mm.Xw.shape[1]
    rho = float(np.tanh(theta[q_dim])) if free_rho else rho0
    return theta[:q_dim].copy(), rho, sigma_u


# --------------------------------------------------------------------------- driver

def _snapshot(k, params: ParameterSet, obs_loglik) -> dict:
    return {"k": k, "beta": params.beta.tolist(), "alpha": params.alpha.tolist(),
            "rho": params.rho, "sigma_u": params.sigma_u, "obs_loglik": obs_loglik}


def run_em(dataset: Dataset, design: DesignSpec | None = None, config: EMConfig | None = None) -> FitResult:
    """Fit the model by Monte Carlo EM.

    Iterates E-step, Cox block and treatment block until the max-norm change
    of ``(beta, alpha, rho[, sigma_u])`` falls below ``config.epsilon``. On
    reaching ``max_iter`` the last iterate is returned with ``converged=False``.
    """
    config = config or EMConfig()
    prob = _prepare(dataset, design)
    mm = prob.mm
    state = initialize(dataset, config=config, _problem=prob)
    z_frozen = standard_draws(prob.keys, config.B, config.seed) if config.frozen_draws else None
    with_sigma = config.estimate_sigma_u
    trace = []
    converged = False
    for k in range(config.max_iter):
        z = z_frozen if z_frozen is not None else standard_draws(prob.keys, config.B, config.seed, k)
        moments = e_step(state, dataset, config, z=z, _problem=prob)
        obs = _mc_observed_loglik(moments, mm, state.baseline)
        trace.append(_snapshot(k, state.params, obs))
        beta, baseline = m_step_cox(moments, dataset, init=state.params.beta, _problem=prob)
        alpha, rho, sigma_u = m_step_treatment(moments, dataset, config, init=state.params, _problem=prob)
        new = ParameterSet(alpha, beta, rho, sigma_u)
        delta = np.max(np.abs(new.vector(with_sigma) - state.params.vector(with_sigma)))
        state = EMState(k + 1, new, baseline)
        if delta < config.epsilon:
            converged = True
            break
    z = z_frozen if z_frozen is not None else standard_draws(prob.keys, config.B, config.seed, state.k)
    final_moments = e_step(state, dataset, config, z=z, _problem=prob)
    final_obs = _mc_observed_loglik(final_moments, mm, state.baseline)
    trace.append(_snapshot(state.k, state.params, final_obs))
    if not converged:
        warnings.warn(f"EM did not converge in {config.max_iter} iterations", RuntimeWarning, stacklevel=2)
    return FitResult(state.params, state.baseline, state.k, converged, final_obs, trace,
                     design=prob.design, draws="frozen" if config.frozen_draws else "fresh")


# --------------------------------------------------------------------------- bootstrap

@dataclass(frozen=True, eq=False)
class BootstrapResult:
    names: tuple[str, ...]
    se: np.ndarray
    estimates: np.ndarray
    n_failed: int

    def to_dict(self) -> dict:
        return {"se": dict(zip(self.names, self.se.tolist())), "n_boot_ok": int(self.estimates.shape[0]),
                "n_failed": self.n_failed}


def parameter_names(design: DesignSpec, with_sigma: bool = False) -> tuple[str, ...]:
    names = [f"beta[{t}]" for t in design.hazard_design] + [f"alpha[{t}]" for t in design.treatment_design]
    names.append("rho")
    if with_sigma:
        names.append("sigma_u")
    return tuple(names)


def bootstrap_se(dataset: Dataset, design: DesignSpec | None = None, config: EMConfig | None = None,
                 n_boot: int = 100,
                 index_sampler: Callable[[int, np.random.Generator], np.ndarray] | None = None,
                 max_failure_rate: float = 0.2) -> BootstrapResult:
    """Nonparametric bootstrap standard errors of ``(beta, alpha, rho[, sigma_u])``.

    Subjects are resampled with replacement; duplicated event times are
    separated with the deterministic tie jitter. Resamples whose fit raises
    or fails to converge count as failures.
    """
    if n_boot < 2:
        raise ValueError("n_boot must be >= 2")
    config = config or EMConfig()
    design = design or DesignSpec.default(dataset.p, dataset.K)
    sampler = index_sampler or (lambda n, gen: gen.integers(0, n, n))
    estimates, failed = [], 0
    for b in range(n_boot):
        gen = SeededStream(config.seed, (0xB0075, b)).generator()
        idx = np.asarray(sampler(dataset.n, gen))
        boot = dataset.take(idx)
        try:
            boot = Dataset.from_arrays(boot.time, boot.event, boot.treatment, boot.X, boot.Z,
                                       tie_policy="jitter", seed=config.seed + b)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = run_em(boot, design, config)
        except FitError as exc:
            log.info("bootstrap resample %d failed: %s", b, exc)
            failed += 1
            continue
        if not fit.converged:
            failed += 1
            continue
        estimates.append(fit.parameters.vector(config.estimate_sigma_u))
    if failed > max_failure_rate * n_boot:
        raise TooManyFailures(f"{failed} of {n_boot} bootstrap resamples failed")
    est = np.array(estimates)
    se = est.std(axis=0, ddof=1) if len(est) > 1 else np.zeros(est.shape[1])
    return BootstrapResult(parameter_names(design, config.estimate_sigma_u), se, est, failed)
