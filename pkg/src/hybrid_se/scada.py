"""Legacy SCADA estimator and its conversion into a rectangular prior.

``irwls_estimate`` runs damped Gauss-Newton on the weighted SCADA residual in
polar coordinates and returns the estimate with its covariance
``(J^T W^-1 J)^-1``. ``polar_to_rect`` linearises the polar-to-rectangular
map to produce the Gaussian prior used by the PMU stage.
"""
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg

from .measurement import scada_function, scada_jacobian, scada_layout

__all__ = [
    "PolarEstimate",
    "RectPrior",
    "RankDeficientError",
    "DivergenceError",
    "gauss_newton",
    "irwls_estimate",
    "polar_to_rect",
    "rect_to_polar",
    "flat_start",
]

log = logging.getLogger(__name__)


class RankDeficientError(np.linalg.LinAlgError):
    def __init__(self, nullity):
        super().__init__(f"normal matrix is singular: null space of dimension {nullity}")
        self.nullity = nullity


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PolarEstimate:
    xi_hat: np.ndarray
    upsilon: np.ndarray
    iterations: int = 0
    objective: tuple = ()


@dataclass(frozen=True)
class RectPrior:
    """Gaussian prior N(s_hat, gamma) on the stacked rectangular state."""
    s_hat: np.ndarray
    gamma: np.ndarray

    @property
    def n_bus(self):
        return self.s_hat.size // 2

    def marginal(self, k):
        """(gamma_k, Gamma_k) for the bus at state position ``k``."""
        sl = slice(2 * k, 2 * k + 2)
        return self.s_hat[sl], self.gamma[sl, sl]

    @cached_property
    def precision(self):
        return linalg.cho_solve(self._chol, np.eye(self.s_hat.size))

    @cached_property
    def _chol(self):
        return linalg.cho_factor(self.gamma, lower=True)

    @cached_property
    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self._chol[0])))

    def block_diagonal(self):
        """Same marginals, cross-bus covariances dropped."""
        g = np.zeros_like(self.gamma)
        for k in range(self.n_bus):
            sl = slice(2 * k, 2 * k + 2)
            g[sl, sl] = self.gamma[sl, sl]
        return RectPrior(self.s_hat.copy(), g)


def gauss_newton(fun, jac, zeta, w_diag, x0, *, max_iter=50, tol=1e-8,
                 max_halvings=10, patience=3):
    """Damped Gauss-Newton for min 0.5 * ||zeta - fun(x)||^2 weighted by 1/w_diag.

    Returns ``(x, covariance, iterations, objective_trace)``. A step is halved
    up to ``max_halvings`` times while the objective increases; after
    ``patience`` consecutive increases the run is declared divergent.
    """
    zeta = np.asarray(zeta, dtype=float)
    sw = 1.0 / np.sqrt(np.asarray(w_diag, dtype=float))
    x = np.array(x0, dtype=float)

    def objective(x_):
        r = (zeta - fun(x_)) * sw
        return 0.5 * float(r @ r)

    f = objective(x)
    trace = [f]
    growth = 0
    it = 0
    for it in range(1, max_iter + 1):
        J = jac(x) * sw[:, None]
        r = (zeta - fun(x)) * sw
        _check_rank(J)
        dx = np.linalg.lstsq(J, r, rcond=None)[0]
        step = 1.0
        for _ in range(max_halvings + 1):
            x_new = x + step * dx
            f_new = objective(x_new)
            if f_new <= f:
                break
            step *= 0.5
        growth = growth + 1 if f_new > f else 0
        if growth >= patience:
            raise DivergenceError(f"objective grew for {growth} consecutive iterations")
        x, f = x_new, f_new
        trace.append(f)
        if np.max(np.abs(step * dx)) < tol:
            break
    else:
        log.warning("Gauss-Newton stopped at max_iter=%d without meeting tol", max_iter)
    J = jac(x) * sw[:, None]
    _check_rank(J)
    cov = np.linalg.inv(J.T @ J)
    return x, 0.5 * (cov + cov.T), it, tuple(trace)


def _check_rank(J):
    sv = np.linalg.svd(J, compute_uv=False)
    rank = int(np.sum(sv > sv[0] * max(J.shape) * np.finfo(float).eps))
    if rank < J.shape[1]:
        raise RankDeficientError(J.shape[1] - rank)


def flat_start(case, ref_angle=0.0):
    """[A_i, phi_i] = [1, 0] for every bus, except the reference angle."""
    xi = np.zeros(2 * case.n_bus)
    xi[0::2] = 1.0
    xi[1] = ref_angle
    return xi


def irwls_estimate(case, zeta, W, init=None, max_iter=50, tol=1e-8, *,
                   ref_bus=None, ref_var=None):
    """SCADA state estimate in polar coordinates.

    The measurement set is invariant to a common angle rotation, so the angle
    of ``ref_bus`` (default: lowest id) is tied to its initial value by a
    pseudo-measurement of variance ``ref_var`` (default: ``1e-6 * min(W)``),
    which pins it for all practical purposes while keeping the covariance
    invertible.
    """
    layout = scada_layout(case)
    W = np.asarray(W, dtype=float)
    if W.size != layout.size or zeta.size != layout.size:
        raise ValueError(f"expected {layout.size} SCADA measurements, got {zeta.size}")
    if np.any(W <= 0):
        raise ValueError("W must be positive")
    x0 = flat_start(case) if init is None else np.asarray(init, dtype=float)
    ref = case.index[case.bus_ids[0] if ref_bus is None else ref_bus]
    ref_val = x0[2 * ref + 1]
    ref_var = 1e-6 * float(W.min()) if ref_var is None else ref_var

    def fun(x):
        return np.append(scada_function(layout, x), x[2 * ref + 1])

    def jac(x):
        J = scada_jacobian(layout, x)
        row = np.zeros((1, J.shape[1]))
        row[0, 2 * ref + 1] = 1.0
        return np.vstack([J, row])

    x, cov, it, trace = gauss_newton(fun, jac, np.append(zeta, ref_val),
                                     np.append(W, ref_var), x0,
                                     max_iter=max_iter, tol=tol)
    if np.any(x[0::2] <= 0):
        raise DivergenceError("estimate reached a non-positive voltage magnitude")
    return PolarEstimate(x, cov, it, trace)


def polar_jacobian(xi):
    """Block-diagonal d(rect)/d(polar) at xi."""
    xi = np.asarray(xi).reshape(-1, 2)
    n = xi.shape[0]
    J = np.zeros((2 * n, 2 * n))
    A, phi = xi[:, 0], xi[:, 1]
    c, s = np.cos(phi), np.sin(phi)
    k = np.arange(n)
    J[2 * k, 2 * k] = c
    J[2 * k, 2 * k + 1] = -A * s
    J[2 * k + 1, 2 * k] = s
    J[2 * k + 1, 2 * k + 1] = A * c
    return J


def polar_to_rect(p):
    """Rectangular prior: mean T(xi_hat), covariance dT Upsilon dT^T."""
    xi = np.asarray(p.xi_hat).reshape(-1, 2)
    s_hat = np.column_stack([xi[:, 0] * np.cos(xi[:, 1]),
                             xi[:, 0] * np.sin(xi[:, 1])]).reshape(-1)
    J = polar_jacobian(p.xi_hat)
    gamma = J @ p.upsilon @ J.T
    return RectPrior(s_hat, 0.5 * (gamma + gamma.T))


def rect_to_polar(s):
    s = np.asarray(s).reshape(-1, 2)
    return np.column_stack([np.hypot(s[:, 0], s[:, 1]),
                            np.arctan2(s[:, 1], s[:, 0])]).reshape(-1)
