"""Inlier noise distributions.

Squared signed-Sampson residuals of inliers, divided by sigma^2, follow a
chi-square law with one degree of freedom; their magnitudes follow the chi
law. Thresholds live in pixels, so they are built from :func:`chi_quantile`,
while the median scale estimators work on squared residuals and use
:func:`chi2_quantile`.

Quantiles are computed by bisection on the closed-form CDF
``F(x) = erf(sqrt(x / 2))``. Probabilities returned by :func:`chi2_cdf` carry
their upper-tail complement so that far-tail round trips do not lose the
digits that ``1 - F(x)`` would otherwise cancel away.
"""

import math

import numpy as np
from scipy import special, stats

from .errors import DomainError, InsufficientDataError

__all__ = [
    "Probability",
    "chi2_cdf",
    "chi2_sf",
    "chi2_pdf",
    "chi2_quantile",
    "chi_quantile",
    "chi2_gof",
]

MIN_GOF_SAMPLES = 20


class Probability(float):
    """A probability in [0, 1] that remembers its complement.

    Behaves as a plain ``float``. ``complement`` is ``1 - value`` computed
    without cancellation when the producer could do so (e.g. via ``erfc``).
    """

    __slots__ = ("complement",)

    def __new__(cls, value, complement=None):
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise DomainError(f"probability must lie in [0, 1], got {value!r}")
        self = super().__new__(cls, value)
        self.complement = 1.0 - value if complement is None else float(complement)
        return self

    def __repr__(self):
        return f"Probability({float(self)!r})"


def _check_nonneg(x):
    if math.isnan(x) or x < 0:
        raise DomainError(f"chi-square argument must be >= 0, got {x!r}")


def chi2_cdf(x):
    """P(Z^2 <= x) for Z standard normal.

    Scalars return a :class:`Probability`; array input returns an ndarray.
    """
    if np.ndim(x) == 0:
        x = float(x)
        _check_nonneg(x)
        s = math.sqrt(0.5 * x)
        return Probability(math.erf(s), math.erfc(s))
    x = np.asarray(x, dtype=float)
    if np.isnan(x).any() or (x < 0).any():
        raise DomainError("chi-square argument must be >= 0")
    return special.erf(np.sqrt(0.5 * x))


def chi2_sf(x):
    """Upper tail ``1 - chi2_cdf(x)``, accurate far into the tail."""
    if np.ndim(x) == 0:
        x = float(x)
        _check_nonneg(x)
        return math.erfc(math.sqrt(0.5 * x))
    x = np.asarray(x, dtype=float)
    if np.isnan(x).any() or (x < 0).any():
        raise DomainError("chi-square argument must be >= 0")
    return special.erfc(np.sqrt(0.5 * x))


def chi2_pdf(x):
    """Density of the chi-square(1) law; infinite at 0."""
    x = float(x)
    _check_nonneg(x)
    if x == 0.0:
        return math.inf
    return math.exp(-0.5 * x) / math.sqrt(2.0 * math.pi * x)


def _bisect(f, target):
    # f increasing; returns x >= 0 with f(x) closest to target
    lo, hi = 0.0, 1.0
    while f(hi) < target:
        lo, hi = hi, 2.0 * hi
    while True:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
    return lo if abs(f(lo) - target) <= abs(f(hi) - target) else hi


def _quantile_scalar(p):
    value = float(p)
    if math.isnan(value) or not 0.0 <= value < 1.0:
        raise DomainError(f"quantile level must lie in [0, 1), got {value!r}")
    complement = getattr(p, "complement", 1.0 - value)
    if complement <= 0.0:
        raise DomainError("quantile level must be < 1")
    if value == 0.0:
        return 0.0
    if value <= 0.5:
        return _bisect(lambda x: math.erf(math.sqrt(0.5 * x)), value)
    # invert the decreasing upper tail through its negation
    return _bisect(lambda x: -math.erfc(math.sqrt(0.5 * x)), -complement)


def chi2_quantile(p):
    """Inverse of :func:`chi2_cdf` on [0, 1)."""
    if np.ndim(p) == 0:
        return _quantile_scalar(p)
    return np.vectorize(_quantile_scalar, otypes=[float])(np.asarray(p, dtype=float))


def chi_quantile(p):
    """Quantile of ``|Z|``: the factor turning a noise scale into a threshold.

    ``chi_quantile(0.99)`` is about 2.5758.
    """
    if np.ndim(p) == 0:
        return math.sqrt(_quantile_scalar(p))
    return np.sqrt(chi2_quantile(p))


def chi2_gof(residuals_sq, sigma, tau=None):
    """Kolmogorov-Smirnov p-value of ``residuals_sq / sigma**2`` against chi2(1).

    If ``tau`` is given, the reference law is chi2(1) truncated at
    ``tau**2 / sigma**2``, matching residuals that already passed an inlier
    threshold ``tau``.
    """
    r2 = np.asarray(residuals_sq, dtype=float).ravel()
    if r2.size < MIN_GOF_SAMPLES:
        raise InsufficientDataError(
            f"goodness of fit needs >= {MIN_GOF_SAMPLES} samples, got {r2.size}"
        )
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma!r}")
    if (r2 < 0).any() or np.isnan(r2).any():
        raise DomainError("squared residuals must be >= 0")
    z = r2 / sigma**2
    if tau is None:
        cdf = chi2_cdf
    else:
        mass = float(chi2_cdf(tau**2 / sigma**2))

        def cdf(x):
            return np.minimum(chi2_cdf(x) / mass, 1.0)

    return Probability(stats.kstest(z, cdf).pvalue)
