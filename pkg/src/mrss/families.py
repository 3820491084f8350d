"""Exponential-family observation channels.

Each channel of the mixed observation vector follows one of three laws,
parameterized by the scalar signal theta (the linear predictor on the link
scale):

=========  ==================  =============================
family     link                log p(z | theta)
=========  ==================  =============================
Gaussian   identity            -log(2 pi s2)/2 - (z-theta)^2/(2 s2)
Bernoulli  logit               z theta - log(1 + e^theta)
Poisson    log                 z theta - e^theta - log z!
=========  ==================  =============================

Families expose the log density and its first two derivatives in theta.
The second derivative is strictly negative for Bernoulli and Poisson at any
finite theta (log-concavity), which is what keeps the mode iteration's
pseudo-variances positive.

All methods accept scalars or arrays and broadcast; out-of-support data
raises :class:`~mrss.errors.UnsupportedValue`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, gammaln

from .errors import UnsupportedValue

# Saturation bound for the logit link. expit(35) differs from 1 by ~6e-16,
# below double resolution, so clamping cannot move any derivative by more
# than ~1e-15 while it removes overflow in exp.
LOGIT_CLAMP = 35.0


def _arr(x):
    return np.asarray(x, dtype=float)


def _ret(out):
    """Return 0-d results as plain floats, arrays unchanged."""
    out = np.asarray(out)
    if out.ndim == 0:
        return float(out)
    return out


class ChannelFamily:
    """Base class; subclasses implement one observation law each."""

    name = "base"

    # -- support ---------------------------------------------------------
    def in_support(self, z):
        raise NotImplementedError

    def check_support(self, z) -> None:
        z = _arr(z)
        ok = np.asarray(self.in_support(z), dtype=bool)
        if not np.all(ok):
            bad = z[~ok] if z.ndim else z
            first = np.ravel(bad)[0] if np.ndim(bad) else bad
            raise UnsupportedValue(
                f"{self.name} channel: value {first!r} outside support"
            )

    # -- densities and derivatives ----------------------------------------
    def log_density(self, z, theta):
        """log p(z | theta), elementwise."""
        raise NotImplementedError

    def d1_d2(self, z, theta):
        """First and second derivative of log p(z | theta) in theta."""
        raise NotImplementedError

    # -- moments on the response scale ------------------------------------
    def mean(self, theta):
        raise NotImplementedError

    def variance(self, theta):
        raise NotImplementedError

    def inverse_link(self, theta):
        """Map the signal to the response-scale mean (same as `mean`)."""
        return self.mean(theta)

    # -- plumbing ----------------------------------------------------------
    def init_signal(self, z):
        """Moment-matching transform of data onto the signal scale.

        Used to start the mode iteration; must stay finite on boundary data
        (zero counts, all-0/1 binaries).
        """
        raise NotImplementedError

    def sample(self, rng, theta):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(type(self).__name__)


class Gaussian(ChannelFamily):
    """Gaussian channel with identity link and known variance sigma2.

    The variance is a model parameter (part of H); it lives here so the
    family carries everything needed to evaluate its density.
    """

    name = "gaussian"

    def __init__(self, sigma2: float = 1.0):
        sigma2 = float(sigma2)
        if not sigma2 > 0.0:
            raise UnsupportedValue(f"gaussian variance must be > 0, got {sigma2}")
        self.sigma2 = sigma2

    def in_support(self, z):
        return np.isfinite(_arr(z))

    def log_density(self, z, theta):
        z, theta = _arr(z), _arr(theta)
        return _ret(
            -0.5 * np.log(2.0 * np.pi * self.sigma2)
            - (z - theta) ** 2 / (2.0 * self.sigma2)
        )

    def d1_d2(self, z, theta):
        d1 = (_arr(z) - _arr(theta)) / self.sigma2
        if np.ndim(d1) == 0:
            return float(d1), -1.0 / self.sigma2
        return d1, np.full(d1.shape, -1.0 / self.sigma2)

    def mean(self, theta):
        return _ret(_arr(theta))

    def variance(self, theta):
        return _ret(np.full(np.shape(_arr(theta)), self.sigma2))

    def init_signal(self, z):
        return _ret(_arr(z))

    def sample(self, rng, theta):
        return rng.normal(_arr(theta), np.sqrt(self.sigma2))

    def __repr__(self):
        return f"Gaussian(sigma2={self.sigma2!r})"

    def __eq__(self, other):
        return type(other) is Gaussian and other.sigma2 == self.sigma2

    def __hash__(self):
        return hash(("gaussian", self.sigma2))


class Bernoulli(ChannelFamily):
    """Bernoulli channel with logit link."""

    name = "bernoulli"

    def in_support(self, z):
        z = _arr(z)
        return (z == 0.0) | (z == 1.0)

    def log_density(self, z, theta):
        z = _arr(z)
        theta = np.clip(_arr(theta), -LOGIT_CLAMP, LOGIT_CLAMP)
        return _ret(z * theta - np.logaddexp(0.0, theta))

    def d1_d2(self, z, theta):
        z = _arr(z)
        theta = np.clip(_arr(theta), -LOGIT_CLAMP, LOGIT_CLAMP)
        p = expit(theta)
        d1 = z - p
        d2 = -p * (1.0 - p)
        if np.ndim(d1) == 0:
            return float(d1), float(d2)
        return d1, d2

    def mean(self, theta):
        theta = np.clip(_arr(theta), -LOGIT_CLAMP, LOGIT_CLAMP)
        return _ret(expit(theta))

    def variance(self, theta):
        p = self.mean(theta)
        return p * (1.0 - p)

    def init_signal(self, z):
        # logit((z + 1/2) / 2): maps {0, 1} to -/+ log 3, finite at both ends.
        q = (_arr(z) + 0.5) / 2.0
        return _ret(np.log(q / (1.0 - q)))

    def sample(self, rng, theta):
        p = self.mean(_arr(theta))
        return (rng.random(np.shape(p)) < p).astype(float)


class Poisson(ChannelFamily):
    """Poisson channel with log link.

    log z! is computed through the log-gamma function; it does not depend on
    theta, so likelihood loops evaluate it once per observation and reuse it
    (see :meth:`log_normalizer`).
    """

    name = "poisson"

    def in_support(self, z):
        z = _arr(z)
        return np.isfinite(z) & (z >= 0.0) & (z == np.floor(z))

    def log_normalizer(self, z):
        """-log z!, the theta-independent part of the log density."""
        return _ret(-gammaln(_arr(z) + 1.0))

    def log_density(self, z, theta):
        z, theta = _arr(z), _arr(theta)
        return _ret(z * theta - np.exp(theta) - gammaln(z + 1.0))

    def d1_d2(self, z, theta):
        rate = np.exp(_arr(theta))
        d1 = _arr(z) - rate
        if np.ndim(d1) == 0:
            return float(d1), -float(rate)
        return d1, -rate

    def mean(self, theta):
        return _ret(np.exp(_arr(theta)))

    def variance(self, theta):
        return self.mean(theta)

    def init_signal(self, z):
        return _ret(np.log(_arr(z) + 0.5))

    def sample(self, rng, theta):
        return rng.poisson(np.exp(_arr(theta))).astype(float)


_BY_NAME = {"gaussian": Gaussian, "bernoulli": Bernoulli, "poisson": Poisson}


def family_from_name(name: str, sigma2: float | None = None) -> ChannelFamily:
    """Construct a family from its lowercase name (CLI/config plumbing)."""
    key = name.strip().lower()
    if key not in _BY_NAME:
        raise UnsupportedValue(f"unknown channel family {name!r}")
    if key == "gaussian":
        return Gaussian(1.0 if sigma2 is None else sigma2)
    return _BY_NAME[key]()
