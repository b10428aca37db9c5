"""Brute-force reference computations used to check the estimators.

Nothing here imports the estimator code paths it is meant to verify: the
truncated-Gaussian functionals integrate the density directly, the grid
posterior uses the covariance (gain) form of the linear-Gaussian update
rather than the information form, and the Monte-Carlo fit only evaluates the
observation log-likelihood.
"""
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .truncnorm import tg_sample

__all__ = [
    "quad_moment",
    "GridPosterior",
    "grid_mmse",
    "simpson_weights",
    "QuadraticFit",
    "mc_loglik_quadratic",
]


def _log_kernel(d):
    if d.is_uniform:
        return lambda x: 0.0
    return lambda x: -0.5 * (x - d.v) ** 2 / d.C


def quad_moment(f, d, epsabs=1e-12):
    """Integral of ``f`` against the density of ``d`` by adaptive Gauss-Kronrod.

    ``f`` is one of ``"1"``, ``"theta"``, ``"theta2"``, ``"neglogpdf"`` or a
    callable. The density is normalised by its own quadrature.
    """
    if d.is_point:
        raise ValueError("a point mass has no density")
    logk = _log_kernel(d)
    # scale the kernel by its maximum on [lo, hi] so the integrals stay O(1)
    mode = min(max(d.v, d.lo), d.hi)
    peak = logk(mode)
    kern = lambda x: math.exp(logk(x) - peak)  # noqa: E731
    opts = {"epsabs": epsabs, "epsrel": 1e-13, "limit": 500,
            "points": _breakpoints(d, mode) or None}
    Z = integrate.quad(kern, d.lo, d.hi, **opts)[0]
    if f == "1":
        g = lambda x: 1.0  # noqa: E731
    elif f == "theta":
        g = lambda x: x  # noqa: E731
    elif f == "theta2":
        g = lambda x: x * x  # noqa: E731
    elif f == "neglogpdf":
        g = lambda x: -(logk(x) - peak) + math.log(Z)  # noqa: E731
    elif callable(f):
        g = f
    else:
        raise ValueError(f"unknown integrand {f!r}")
    return integrate.quad(lambda x: g(x) * kern(x), d.lo, d.hi, **opts)[0] / Z


def _breakpoints(d, mode):
    """Interior points at multiples of the density's length scale around its mode.

    A mode pinned at a bound with a tiny C is an exponential spike of width
    C / |v - mode|; without breakpoints the adaptive rule can step over it.
    """
    if d.is_uniform:
        return []
    scale = math.sqrt(d.C)
    if mode != d.v:
        scale = min(scale, d.C / abs(d.v - mode))
    pts = {mode} if d.lo < mode < d.hi else set()
    for k in (1, 4, 16, 64, 256):
        for x in (mode - k * scale, mode + k * scale):
            if d.lo < x < d.hi:
                pts.add(x)
    return sorted(pts)


def simpson_weights(n, h):
    """Composite Simpson weights for ``n`` (odd) equally spaced points."""
    if n == 1:
        return np.ones(1)
    if n % 2 == 0 or n < 3:
        raise ValueError("Simpson's rule needs an odd number of points >= 3")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


@dataclass(frozen=True)
class GridPosterior:
    buses: tuple
    grids: tuple           # one 1-D grid per bus in ``buses``
    weights: np.ndarray    # normalised, shape = tuple(len(g) for g in grids)
    mean: np.ndarray
    cov: np.ndarray
    within_cov: np.ndarray  # weighted average of conditional covariances
    phase_mean: dict

    @property
    def spacing(self):
        return tuple(g[1] - g[0] if g.size > 1 else 0.0 for g in self.grids)


def _conditional(A, r_var, s_hat, gamma, z):
    """Gaussian posterior of s and log marginal likelihood for z = A s + w."""
    S = A @ gamma @ A.T + np.diag(r_var)
    L = np.linalg.cholesky(S)
    innov = z - A @ s_hat
    a = np.linalg.solve(L, innov)
    K = np.linalg.solve(L.T, np.linalg.solve(L, A @ gamma)).T
    mean = s_hat + K @ innov
    cov = gamma - K @ A @ gamma
    loglik = -0.5 * (a @ a) - np.sum(np.log(np.diag(L))) - 0.5 * z.size * math.log(2 * math.pi)
    return mean, 0.5 * (cov + cov.T), loglik


def grid_mmse(model, prior, prior_theta, resolution=201, order=None):
    """MMSE estimate of s by integrating the phase errors on a tensor grid.

    For every grid point the observation model is linear with known Theta,
    so p(s | theta, z) is Gaussian and p(z | theta) is available in closed
    form; the mixture over the grid, weighted by prior times likelihood times
    Simpson weights, approximates p(s | z).
    """
    buses = tuple(model.pmu_buses if order is None else order)
    if sorted(buses) != sorted(model.pmu_buses):
        raise ValueError("order must be a permutation of the PMU buses")
    if len(buses) > 2:
        raise ValueError(f"grid oracle supports at most 2 phase dimensions, got {len(buses)}")
    grids, qw, logp = [], [], []
    for i in buses:
        d = prior_theta[i]
        if d.is_point:
            g = np.array([d.lo])
            w = np.ones(1)
        else:
            g = np.linspace(d.lo, d.hi, resolution)
            w = simpson_weights(resolution, g[1] - g[0])
        lk = _log_kernel(d)
        grids.append(g)
        qw.append(w)
        logp.append(np.array([lk(x) for x in g]) + np.log(w))
    shape = tuple(g.size for g in grids)
    n = model.n_state
    logw = np.zeros(shape)
    means = np.zeros(shape + (n,))
    covs = np.zeros(shape + (n, n))
    for idx in itertools.product(*[range(k) for k in shape]):
        scale = np.zeros(model.z.size)
        for b, k in zip(buses, idx):
            scale[model.rows[b]] = grids[buses.index(b)][k]
        A = model.H + scale[:, None] * model.G
        m, c, ll = _conditional(A, model.r_var, prior.s_hat, prior.gamma, model.z)
        logw[idx] = ll + sum(lp[k] for lp, k in zip(logp, idx))
        means[idx] = m
        covs[idx] = c
    w = np.exp(logw - logw.max())
    w /= w.sum()
    flat_w = w.reshape(-1)
    flat_m = means.reshape(-1, n)
    mean = flat_w @ flat_m
    within = np.tensordot(flat_w, covs.reshape(-1, n, n), axes=1)
    centred = flat_m - mean
    cov = within + (centred * flat_w[:, None]).T @ centred
    phase_mean = {}
    for axis, b in enumerate(buses):
        marg = w.sum(axis=tuple(a for a in range(len(buses)) if a != axis))
        phase_mean[b] = float(marg @ grids[axis])
    return GridPosterior(buses, tuple(grids), w, mean, 0.5 * (cov + cov.T), within, phase_mean)


@dataclass(frozen=True)
class QuadraticFit:
    """E[ln p] ~ -0.5 x^T precision x + info^T x + const, with standard errors."""
    precision: np.ndarray
    info: np.ndarray
    precision_se: np.ndarray
    info_se: np.ndarray
    n_samples: int


def mc_loglik_quadratic(target, z, H, G, sigma, blocks, beliefs, phase, n_samples, rng,
                        chunk=200_000):
    """Monte-Carlo quadratic coefficients of E[ln N(z | (H + theta G) s, sigma^2 I)].

    ``blocks`` lists the state blocks (bus ids) matching the column pairs of
    ``H`` and ``G``. The expectation is over theta ~ ``phase`` (a
    TruncatedGaussian or PhaseBelief) and s_k ~ N(beliefs[k]) for every
    block other than the target. ``target`` is a bus id (quadratic in
    s_target) or ``"theta"`` (quadratic in theta, all blocks random).

    For each draw the log-likelihood is exactly quadratic in the target, so a
    least-squares fit on any grid returns the per-draw coefficients; these
    are averaged and their sample spread gives the standard errors.
    """
    z = np.asarray(z, dtype=float)
    blocks = tuple(blocks)
    phase = getattr(phase, "dist", phase)
    s2 = sigma**2
    cols = {b: slice(2 * k, 2 * k + 2) for k, b in enumerate(blocks)}
    if target != "theta" and target not in cols:
        raise ValueError(f"target {target!r} not among the blocks")
    rest = [b for b in blocks if b != target]
    roots = {b: _psd_sqrt(beliefs[b][1]) for b in rest}
    stats = [_Running(), _Running()]
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        th = np.broadcast_to(np.asarray(tg_sample(phase, rng, m), dtype=float), (m,))
        Hs = np.zeros((m, z.size))
        Gs = np.zeros((m, z.size))
        for b in rest:
            s = beliefs[b][0] + rng.standard_normal((m, 2)) @ roots[b].T
            Hs += s @ H[:, cols[b]].T
            Gs += s @ G[:, cols[b]].T
        if target == "theta":
            prec = np.einsum("nk,nk->n", Gs, Gs)[:, None, None] / s2
            info = np.einsum("nk,nk->n", z - Hs, Gs)[:, None] / s2
        else:
            Hi, Gi = H[:, cols[target]], G[:, cols[target]]
            A = Hi[None] + th[:, None, None] * Gi[None]        # (m, rows, 2)
            prec = np.einsum("nki,nkj->nij", A, A) / s2
            info = np.einsum("nki,nk->ni", A, z - Hs - th[:, None] * Gs) / s2
        stats[0].add(prec)
        stats[1].add(info)
        done += m
    (mp, sp), (mi, si) = (st.result() for st in stats)
    if target == "theta":
        return QuadraticFit(float(mp[0, 0]), float(mi[0]), float(sp[0, 0]), float(si[0]),
                            n_samples)
    return QuadraticFit(mp, mi, sp, si, n_samples)


def _psd_sqrt(P):
    w, V = np.linalg.eigh(0.5 * (P + P.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


class _Running:
    """Chunk-wise mean and variance (Chan et al. pairwise combination)."""

    def __init__(self):
        self.n, self.mean, self.m2 = 0, 0.0, 0.0

    def add(self, x):
        k = x.shape[0]
        mean_b = x.mean(0)
        m2_b = ((x - mean_b) ** 2).sum(0)
        delta = mean_b - self.mean
        tot = self.n + k
        self.mean = self.mean + delta * k / tot
        self.m2 = self.m2 + m2_b + delta**2 * self.n * k / tot
        self.n = tot

    def result(self):
        """(mean, standard error of the mean)."""
        var = self.m2 / max(self.n - 1, 1)
        return self.mean, np.sqrt(var / self.n)
