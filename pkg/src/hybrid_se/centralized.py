"""Whole-network estimators over the stacked PMU model.

The linearised observation model is ``z = (H + Theta G) s + w`` with
``Theta = Bldiag{theta_i I}`` over PMU buses and ``w ~ N(0, R)``. The
variational estimator alternates

* q(theta_i): truncated Gaussian with precision
  ``1/C~_i + E||G_i s||^2 / sigma_i^2`` and information
  ``v~_i/C~_i + E[(z_i - H_i s)^T G_i s] / sigma_i^2``;
* q(s): Gaussian with precision
  ``Gamma^-1 + (H + Omega G)^T R^-1 (H + Omega G) + G^T (Lambda - Omega^2) R^-1 G``,

where Omega and Lambda repeat the first and second moments of q(theta_i).
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .network import build_measurement_model
from .truncnorm import TruncatedGaussian

__all__ = [
    "StackedModel",
    "PhaseBelief",
    "CentralizedPosterior",
    "AMResult",
    "stack_model",
    "uniform_phase_prior",
    "wls_estimate",
    "cvi_update_theta",
    "cvi_update_s",
    "cvi_run",
    "am_estimate",
    "elbo",
    "expected_sq_residual",
]


@dataclass(frozen=True)
class StackedModel:
    z: np.ndarray
    H: np.ndarray
    G: np.ndarray
    r_var: np.ndarray          # diagonal of R
    rows: dict                 # PMU bus id -> row slice
    cols: dict                 # bus id -> state column slice
    pmu_buses: tuple
    sigma: dict

    @property
    def n_state(self):
        return self.H.shape[1]

    def omega(self, values):
        """Row-wise repetition of per-PMU scalars (Omega / Lambda diagonals)."""
        out = np.zeros(self.H.shape[0])
        for i, val in values.items():
            out[self.rows[i]] = val
        return out

    def local(self, i):
        """(z_i, H_i, G_i) rows of PMU bus i over all state columns."""
        r = self.rows[i]
        return self.z[r], self.H[r], self.G[r]


def stack_model(case, pmu, sigma):
    """Stack per-bus blocks in ascending PMU order, zero-padded to 2|B| columns."""
    n = case.n_bus
    cols = {bid: slice(2 * k, 2 * k + 2) for k, bid in enumerate(case.bus_ids)}
    Hs, Gs, zs, rv, rows = [], [], [], [], {}
    start = 0
    for i in case.pmu_list:
        bm = build_measurement_model(case, i)
        m = bm.n_rows
        if pmu[i].size != m:
            raise ValueError(f"bus {i}: expected {m} PMU values, got {pmu[i].size}")
        Hi = np.zeros((m, 2 * n))
        Gi = np.zeros((m, 2 * n))
        for j in bm.neighbors:
            Hi[:, cols[j]] = bm.H[j]
            Gi[:, cols[j]] = bm.G[j]
        Hs.append(Hi)
        Gs.append(Gi)
        zs.append(np.asarray(pmu[i], dtype=float))
        if not sigma[i] > 0:
            raise ValueError(f"bus {i}: PMU noise level must be positive")
        rv.append(np.full(m, sigma[i] ** 2))
        rows[i] = slice(start, start + m)
        start += m
    if Hs:
        H, G, z, r_var = np.vstack(Hs), np.vstack(Gs), np.concatenate(zs), np.concatenate(rv)
    else:
        H = G = np.zeros((0, 2 * n))
        z = r_var = np.zeros(0)
    return StackedModel(z, H, G, r_var, rows, cols, case.pmu_list,
                        {i: float(sigma[i]) for i in case.pmu_list})


def uniform_phase_prior(pmu_buses, bound):
    """U(-bound, bound) for each PMU; a point mass at zero when bound == 0."""
    return {i: TruncatedGaussian(-bound, bound, 0.0, math.inf) for i in pmu_buses}


@dataclass(frozen=True)
class PhaseBelief:
    """Truncated-Gaussian belief over one phase error with cached moments."""
    dist: TruncatedGaussian
    mean: float
    second: float

    @classmethod
    def of(cls, dist):
        return cls(dist, dist.mean(), dist.second_moment())

    @property
    def v(self):
        return self.dist.v

    @property
    def C(self):
        return self.dist.C

    @property
    def variance(self):
        return max(self.second - self.mean**2, 0.0)


def _solve_info(info, h):
    try:
        cf = linalg.cho_factor(info, lower=True)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("information matrix is not positive definite") from exc
    mu = linalg.cho_solve(cf, h)
    P = linalg.cho_solve(cf, np.eye(info.shape[0]))
    return mu, 0.5 * (P + P.T)


def wls_estimate(model, prior, omega=None):
    """Posterior mean and covariance with the phase errors fixed at ``omega``.

    Minimises ``||s_hat - s||^2_Gamma + ||z - (H + Theta G) s||^2_R``; Theta
    is zero when ``omega`` is None.
    """
    A = model.H if omega is None else model.H + model.omega(omega)[:, None] * model.G
    Ri = 1.0 / model.r_var
    info = prior.precision + A.T @ (Ri[:, None] * A)
    h = prior.precision @ prior.s_hat + A.T @ (Ri * model.z)
    return _solve_info(info, h)


def _phase_stats(model, mu, P):
    """Per PMU bus: (E||G_i s||^2, E[(z_i - H_i s)^T G_i s])."""
    out = {}
    for i in model.pmu_buses:
        z, H, G = model.local(i)
        Gmu, Hmu = G @ mu, H @ mu
        quad = float(Gmu @ Gmu + np.sum((G @ P) * G))
        cross = float(z @ Gmu - Hmu @ Gmu - np.sum((H @ P) * G))
        out[i] = (quad, cross)
    return out


def _phase_posterior(prior, sigma2, quad, cross):
    prec0 = 0.0 if prior.is_uniform else 1.0 / prior.C
    info0 = 0.0 if prior.is_uniform else prior.v / prior.C
    prec = prec0 + quad / sigma2
    if not prec > 0:
        raise ArithmeticError("phase posterior variance is not positive")
    return prior.with_params((info0 + cross / sigma2) / prec, 1.0 / prec)


def cvi_update_theta(model, prior_theta, mu, P):
    """q(theta_i) for every PMU bus given the Gaussian q(s) = N(mu, P)."""
    out = {}
    for i, (quad, cross) in _phase_stats(model, mu, P).items():
        prior = prior_theta[i]
        if prior.is_point:
            out[i] = PhaseBelief.of(prior)
            continue
        out[i] = PhaseBelief.of(_phase_posterior(prior, model.sigma[i] ** 2, quad, cross))
    return out


def cvi_update_s(model, prior, phase):
    """Gaussian q(s) given phase beliefs, in information form."""
    om = model.omega({i: b.mean for i, b in phase.items()})
    lam = model.omega({i: b.second for i, b in phase.items()})
    spread = np.maximum(lam - om**2, 0.0)
    A = model.H + om[:, None] * model.G
    Ri = 1.0 / model.r_var
    info = (prior.precision + A.T @ (Ri[:, None] * A)
            + model.G.T @ ((spread * Ri)[:, None] * model.G))
    h = prior.precision @ prior.s_hat + A.T @ (Ri * model.z)
    return _solve_info(info, h)


def expected_sq_residual(model, mu, P, phase):
    """Per-row-weighted E||z - (H + Theta G) s||^2_{R^-1} under q(s) q(theta)."""
    om = model.omega({i: b.mean for i, b in phase.items()})
    lam = model.omega({i: b.second for i, b in phase.items()})
    spread = np.maximum(lam - om**2, 0.0)
    A = model.H + om[:, None] * model.G
    Ri = 1.0 / model.r_var
    r = model.z - A @ mu
    Gmu = model.G @ mu
    total = float(np.sum(Ri * r * r))
    total += float(np.sum(Ri[:, None] * (A @ P) * A))
    total += float(np.sum(spread * Ri * Gmu * Gmu))
    total += float(np.sum((spread * Ri)[:, None] * (model.G @ P) * model.G))
    return total


def _gauss_kl_terms(prior, mu, P):
    """E_q[log p(s)] + H[q(s)] for Gaussian q = N(mu, P)."""
    n = mu.size
    d = mu - prior.s_hat
    Pi = prior.precision
    e_log_prior = -0.5 * (n * math.log(2 * math.pi) + prior.logdet
                          + float(d @ Pi @ d) + float(np.sum(Pi * P)))
    sign, logdet_p = np.linalg.slogdet(P)
    if sign <= 0:
        raise np.linalg.LinAlgError("q(s) covariance is not positive definite")
    entropy = 0.5 * (n * (1 + math.log(2 * math.pi)) + logdet_p)
    return e_log_prior + entropy


def _phase_kl_terms(prior_theta, phase):
    """sum_i E_q[log p(theta_i)] + H[q(theta_i)]; point-mass priors contribute 0."""
    total = 0.0
    for i, b in phase.items():
        prior = prior_theta[i]
        if prior.is_point:
            continue
        total += prior.expected_logpdf(b.mean, b.second) + b.dist.entropy()
    return total


def elbo(model, prior, prior_theta, mu, P, phase):
    """Evidence lower bound of q(s) q(theta) in closed form."""
    m = model.z.size
    loglik = -0.5 * (m * math.log(2 * math.pi) + float(np.sum(np.log(model.r_var)))
                     + expected_sq_residual(model, mu, P, phase))
    return loglik + _gauss_kl_terms(prior, mu, P) + _phase_kl_terms(prior_theta, phase)


@dataclass
class CentralizedPosterior:
    mu: np.ndarray
    P: np.ndarray
    phase: dict
    trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self):
        return len(self.trace) - 1

    def omega(self, model):
        return np.diag(model.omega({i: b.mean for i, b in self.phase.items()}))

    def lam(self, model):
        return np.diag(model.omega({i: b.second for i, b in self.phase.items()}))


def _prior_phase(prior_theta):
    return {i: PhaseBelief.of(d) for i, d in prior_theta.items()}


def cvi_run(model, prior, prior_theta, max_iter=50, tol=1e-8, *, track_elbo=True):
    """Coordinate ascent on q(theta) q(s) from q(s) = prior.

    ``trace[k]`` holds iteration k (0 = prior) with keys ``mu``, ``phase``,
    ``delta`` (sup-norm change in mu) and, when tracked, ``elbo`` after the
    theta half-step (``elbo_theta``) and after the s half-step (``elbo``).
    """
    mu, P = prior.s_hat.copy(), prior.gamma.copy()
    phase = _prior_phase({i: prior_theta[i] for i in model.pmu_buses})
    first = {"iteration": 0, "mu": mu, "phase": phase, "delta": math.inf}
    if track_elbo:
        first["elbo"] = elbo(model, prior, prior_theta, mu, P, phase)
    trace = [first]
    converged = False
    for it in range(1, max_iter + 1):
        phase = cvi_update_theta(model, prior_theta, mu, P)
        rec = {"iteration": it}
        if track_elbo:
            rec["elbo_theta"] = elbo(model, prior, prior_theta, mu, P, phase)
        mu_new, P = cvi_update_s(model, prior, phase)
        delta = float(np.max(np.abs(mu_new - mu))) if mu.size else 0.0
        mu = mu_new
        rec.update(mu=mu, phase=phase, delta=delta)
        if track_elbo:
            rec["elbo"] = elbo(model, prior, prior_theta, mu, P, phase)
        trace.append(rec)
        if delta < tol:
            converged = True
            break
    return CentralizedPosterior(mu, P, phase, trace, converged)


@dataclass
class AMResult:
    s_hat: np.ndarray
    theta_hat: dict
    trace: list = field(default_factory=list)
    converged: bool = False


def log_joint(model, prior, prior_theta, s, theta):
    """log p(z | theta, s) + log p(s) + sum log p(theta_i), up to constants."""
    A = model.H + model.omega(theta)[:, None] * model.G
    r = model.z - A @ s
    d = s - prior.s_hat
    val = -0.5 * float(np.sum(r * r / model.r_var)) - 0.5 * float(d @ prior.precision @ d)
    for i, t in theta.items():
        p = prior_theta[i]
        if p.is_point or p.is_uniform:
            continue
        val -= 0.5 * (t - p.v) ** 2 / p.C
    return val


def _am_theta(model, prior_theta, s):
    out = {}
    for i in model.pmu_buses:
        prior = prior_theta[i]
        if prior.is_point:
            out[i] = prior.lo
            continue
        z, H, G = model.local(i)
        Gs = G @ s
        quad = float(Gs @ Gs)
        cross = float((z - H @ s) @ Gs)
        sigma2 = model.sigma[i] ** 2
        prec = (0.0 if prior.is_uniform else 1.0 / prior.C) + quad / sigma2
        info = (0.0 if prior.is_uniform else prior.v / prior.C) + cross / sigma2
        t = info / prec if prec > 0 else 0.5 * (prior.lo + prior.hi)
        out[i] = min(max(t, prior.lo), prior.hi)
    return out


def am_estimate(model, prior, prior_theta, max_iter=50, tol=1e-8):
    """Alternating maximisation of the joint posterior over theta and s.

    Starts from s = s_hat; each iteration maximises over theta (per bus,
    clipped to the prior support) then solves the WLS problem in s.
    """
    s = prior.s_hat.copy()
    theta = {i: 0.0 for i in model.pmu_buses}
    trace = [{"iteration": 0, "mu": s, "theta": theta,
              "objective": log_joint(model, prior, prior_theta, s, theta), "delta": math.inf}]
    converged = False
    for it in range(1, max_iter + 1):
        theta = _am_theta(model, prior_theta, s)
        obj_theta = log_joint(model, prior, prior_theta, s, theta)
        s_new, _ = wls_estimate(model, prior, theta)
        delta = float(np.max(np.abs(s_new - s))) if s.size else 0.0
        s = s_new
        trace.append({"iteration": it, "mu": s, "theta": theta, "delta": delta,
                      "objective_theta": obj_theta,
                      "objective": log_joint(model, prior, prior_theta, s, theta)})
        if delta < tol:
            converged = True
            break
    return AMResult(s, theta, trace, converged)
