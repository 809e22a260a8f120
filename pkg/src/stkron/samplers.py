"""Generic MCMC kernels: univariate slice sampler (stepping-out plus
shrinkage), elliptical slice sampler, inverse-gamma conjugate draws, and a
seeded counter-based RNG contract.

Every sampler is deterministic given an RngState; inference gives each Gibbs
block its own stream so draws do not depend on evaluation counts elsewhere.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

_TWO_PI = 2.0 * math.pi
_MAX_SHRINK = 1000


class RngState:
    """Counter-based splittable random source.

    (seed, stream) form the 128-bit Philox key, so identical
    (seed, stream, call sequence) yields identical draws on any platform.
    Use split(stream) to derive an independent stream from the same seed.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed) % (1 << 64)
        self.stream = int(stream) % (1 << 64)
        key = (self.stream << 64) | self.seed
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, stream):
        return RngState(self.seed, stream)

    def __repr__(self):
        return "RngState(seed=%d, stream=%d)" % (self.seed, self.stream)


@dataclass(frozen=True)
class SliceConfig:
    width: float = 1.0
    max_steps: int = 50

    def __post_init__(self):
        if not (self.width > 0):
            raise ValueError("width must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


def _bump(counters, key, n=1):
    if counters is not None:
        counters[key] = counters.get(key, 0) + n


def slice_sample_1d(logdensity, x0, cfg, rng, counters=None):
    """One update of Neal's stepping-out + shrinkage slice sampler.

    Returns a point with finite logdensity; the invariant distribution is
    exp(logdensity).  Raises ValueError if logdensity(x0) is not finite and
    NumericalError if shrinkage fails to accept within 1000 contractions.
    """
    y0 = logdensity(x0)
    if not np.isfinite(y0):
        raise ValueError("slice_sample_1d requires finite logdensity at x0")
    gen = rng.gen
    logy = y0 - gen.standard_exponential()
    # place an initial bracket of size width around x0, then step out
    left = x0 - cfg.width * gen.random()
    right = left + cfg.width
    j = int(math.floor(cfg.max_steps * gen.random()))
    k = cfg.max_steps - 1 - j
    while j > 0 and logdensity(left) > logy:
        left -= cfg.width
        j -= 1
        _bump(counters, "slice_expand")
    while k > 0 and logdensity(right) > logy:
        right += cfg.width
        k -= 1
        _bump(counters, "slice_expand")
    for _ in range(_MAX_SHRINK):
        x1 = left + gen.random() * (right - left)
        if logdensity(x1) > logy:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
        _bump(counters, "slice_shrink")
    raise NumericalError("slice sampler: no acceptance after %d contractions"
                         % _MAX_SHRINK)


def ess_update(loglik, prior_draw, current, rng, counters=None):
    """One elliptical slice update for a zero-mean Gaussian prior.

    prior_draw(rng) must return an independent draw from the prior with the
    same shape as current; the update rotates on the ellipse through current
    and that draw, shrinking the angle bracket until the log-likelihood
    threshold is met.  Invariant distribution: prior x exp(loglik).
    """
    ll0 = loglik(current)
    if not np.isfinite(ll0):
        raise ValueError("ess_update requires finite loglik at current")
    gen = rng.gen
    nu = prior_draw(rng)
    logy = ll0 - gen.standard_exponential()
    theta = gen.random() * _TWO_PI
    lo, hi = theta - _TWO_PI, theta
    for _ in range(_MAX_SHRINK):
        prop = current * math.cos(theta) + nu * math.sin(theta)
        if loglik(prop) > logy:
            return prop
        if theta < 0:
            lo = theta
        else:
            hi = theta
        theta = lo + gen.random() * (hi - lo)
        _bump(counters, "ess_shrink")
    raise NumericalError("ess_update: no acceptance after %d contractions"
                         % _MAX_SHRINK)


def inverse_gamma_draw(a, b, rng):
    """Draw from the inverse-gamma density proportional to x^(-a-1) e^(-b/x).

    Implemented as b / Gamma(a, 1), so draws with (a, c*b) are exactly c
    times draws with (a, b) under the same stream.
    """
    if not (a > 0) or not (b > 0):
        raise ValueError("inverse-gamma parameters must be positive")
    g = rng.gen.gamma(a, 1.0)
    if g <= 0:
        raise NumericalError("gamma variate underflowed to zero")
    return b / g
