"""Truncated univariate Gaussian: moments, entropy, density and sampling.

A ``TruncatedGaussian(lo, hi, v, C)`` is the normal ``N(v, C)`` restricted to
``[lo, hi]`` and renormalised. ``C = inf`` gives the uniform distribution on
``[lo, hi]``; ``lo == hi`` gives a point mass.

All moments go through the standardised bounds ``a = (lo - v)/sqrt(C)`` and
``b = (hi - v)/sqrt(C)``. Three numerical regimes are used:

* interval straddling zero: CDF mass as a sum of two ``erf`` terms;
* one-sided, moderate: Mills ratios via ``erfcx`` (no underflow);
* narrow or deep-tail intervals: Gauss-Legendre on the shifted variable,
  which keeps the variance free of cancellation.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

__all__ = [
    "TruncatedGaussian",
    "TruncationUnderflowError",
    "tg_moment1",
    "tg_moment2",
    "tg_variance",
    "tg_entropy",
    "tg_sample",
    "tg_logpdf",
]

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT_HALF_PI = math.sqrt(0.5 * math.pi)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)

# standardised lower bound beyond which the tail is integrated numerically
_DEEP_TAIL = 8.0
# exponent range kept when truncating an infinite / very long tail interval
_TAIL_SPAN = 60.0


class TruncationUnderflowError(ArithmeticError):
    """The truncated mass is numerically indistinguishable from zero."""


@dataclass(frozen=True)
class TruncatedGaussian:
    lo: float
    hi: float
    v: float = 0.0
    C: float = math.inf

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("truncation bounds must be finite")
        if self.lo > self.hi:
            raise ValueError(f"lo={self.lo} exceeds hi={self.hi}")
        if not self.C > 0:
            raise ValueError(f"variance C must be positive, got {self.C}")
        if not math.isfinite(self.v):
            raise ValueError("mean v must be finite")

    @property
    def is_point(self):
        return self.lo == self.hi

    @property
    def is_uniform(self):
        return math.isinf(self.C)

    @property
    def bounds(self):
        return self.lo, self.hi

    def with_params(self, v, C):
        """Same support, new untruncated mean and variance."""
        return TruncatedGaussian(self.lo, self.hi, v, C)

    def mean(self):
        return tg_moment1(self)

    def second_moment(self):
        return tg_moment2(self)

    def variance(self):
        return tg_variance(self)

    def entropy(self):
        return tg_entropy(self)

    def logpdf(self, x):
        return tg_logpdf(self, x)

    def pdf(self, x):
        return np.exp(tg_logpdf(self, x))

    def sample(self, rng, size=None):
        return tg_sample(self, rng, size)

    def expected_logpdf(self, m1, m2):
        """E[log p(theta)] under any law on [lo, hi] with moments m1, m2."""
        if self.is_point:
            raise ValueError("log-density of a point mass is not finite")
        if self.is_uniform:
            return -math.log(self.hi - self.lo)
        log_z, _, _ = _standard_stats(*self._standardised())
        quad = (m2 - 2.0 * self.v * m1 + self.v**2) / self.C
        return -0.5 * quad - 0.5 * math.log(self.C) - _LOG_SQRT_2PI - log_z

    def _standardised(self):
        s = math.sqrt(self.C)
        return (self.lo - self.v) / s, (self.hi - self.v) / s


def _mills(x):
    # Q(x) / phi(x), finite for all x >= 0
    return _SQRT_HALF_PI * special.erfcx(x / math.sqrt(2.0))


def _quadrature_stats(a, b, c):
    """Moments of N(0,1) on [a, b] by Gauss-Legendre around c in [a, b]."""
    lo, hi = a - c, b - c
    if c > 0:
        hi = min(hi, _TAIL_SPAN / c)
    elif c < 0:
        lo = max(lo, _TAIL_SPAN / c)
    half = 0.5 * (hi - lo)
    u = lo + half * (_GL_NODES + 1.0)
    w = half * _GL_WEIGHTS * np.exp(-c * u - 0.5 * u * u)
    mass = w.sum()
    if not mass > 0 or not math.isfinite(mass):
        raise TruncationUnderflowError(f"no representable mass on [{a}, {b}]")
    mu = float(w @ u) / mass
    var = float(w @ (u - mu) ** 2) / mass
    log_z = math.log(mass) - 0.5 * c * c - _LOG_SQRT_2PI
    return log_z, c + mu, var


def _standard_stats(a, b):
    """(log mass, mean, variance) of the standard normal truncated to [a, b]."""
    if b <= 0.0 and a < 0.0:
        log_z, m, var = _standard_stats(-b, -a)
        return log_z, -m, var
    c = min(max(0.0, a), b)
    narrow = (b - a) * (1.0 + max(abs(a), abs(b))) < 1.0
    if narrow or c >= _DEEP_TAIL:
        return _quadrature_stats(a, b, c)

    if a >= 0.0:
        # phi(a)/Z and phi(b)/Z through Mills ratios; ratio e = phi(b)/phi(a)
        e = 0.0 if math.isinf(b) else math.exp(-0.5 * (b - a) * (b + a))
        rb = 0.0 if math.isinf(b) else _mills(b)
        denom = _mills(a) - rb * e
        if not denom > 0:
            raise TruncationUnderflowError(f"no representable mass on [{a}, {b}]")
        pa, pb = 1.0 / denom, e / denom
        log_z = -0.5 * a * a - _LOG_SQRT_2PI + math.log(denom)
    else:
        z = 0.5 * (math.erf(b / math.sqrt(2.0)) + math.erf(-a / math.sqrt(2.0)))
        if not z > 0:
            raise TruncationUnderflowError(f"no representable mass on [{a}, {b}]")
        pa = 0.0 if math.isinf(a) else math.exp(-0.5 * a * a - _LOG_SQRT_2PI) / z
        pb = 0.0 if math.isinf(b) else math.exp(-0.5 * b * b - _LOG_SQRT_2PI) / z
        log_z = math.log(z)

    ta = 0.0 if pa == 0.0 else a * pa
    tb = 0.0 if pb == 0.0 else b * pb
    m = pa - pb
    var = 1.0 + ta - tb - m * m
    return log_z, m, var


def _stats(d):
    """(mean, variance) in the original units."""
    if d.is_point:
        return d.lo, 0.0
    if d.is_uniform:
        return 0.5 * (d.lo + d.hi), (d.hi - d.lo) ** 2 / 12.0
    _, m, var = _standard_stats(*d._standardised())
    s = math.sqrt(d.C)
    mean = min(max(d.v + s * m, d.lo), d.hi)
    return mean, max(var, 0.0) * d.C


def tg_moment1(d):
    """First moment E[theta]."""
    return _stats(d)[0]


def tg_variance(d):
    return _stats(d)[1]


def tg_moment2(d):
    """Second raw moment E[theta^2]."""
    mean, var = _stats(d)
    return var + mean * mean


def tg_entropy(d):
    """Differential entropy in nats (-inf for a point mass)."""
    if d.is_point:
        return -math.inf
    if d.is_uniform:
        return math.log(d.hi - d.lo)
    log_z, m, var = _standard_stats(*d._standardised())
    return 0.5 * math.log(d.C) + _LOG_SQRT_2PI + log_z + 0.5 * (var + m * m)


def tg_logpdf(d, x):
    x = np.asarray(x, dtype=float)
    inside = (x >= d.lo) & (x <= d.hi)
    if d.is_point:
        return np.where(x == d.lo, np.inf, -np.inf)
    if d.is_uniform:
        return np.where(inside, -math.log(d.hi - d.lo), -np.inf)
    log_z, _, _ = _standard_stats(*d._standardised())
    t = (x - d.v) / math.sqrt(d.C)
    val = -0.5 * t * t - _LOG_SQRT_2PI - 0.5 * math.log(d.C) - log_z
    return np.where(inside, val, -np.inf)


def tg_sample(d, rng, size=None):
    """Draw from ``d`` with a numpy ``Generator``; samples lie in [lo, hi]."""
    if d.is_point:
        out = np.full(size if size is not None else (), d.lo)
    elif d.is_uniform:
        out = rng.uniform(d.lo, d.hi, size=size)
    else:
        a, b = d._standardised()
        out = stats.truncnorm.rvs(a, b, loc=d.v, scale=math.sqrt(d.C),
                                  size=size, random_state=rng)
    out = np.clip(out, d.lo, d.hi)
    return float(out) if size is None else out
