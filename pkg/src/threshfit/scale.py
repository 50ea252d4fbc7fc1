"""Inlier noise scale estimation and self-tuning inlier thresholds.

Thresholds and scales are linked by ``tau = chi_quantile(alpha) * sigma``.
Three estimators are provided:

``simfit``
    The classical alternation: MSAC on a shrinking inlier set, with the
    plain median estimator on the fitting residuals.
``simfitpp``
    Fits on a random train split, estimates the scale on the held-out split
    with a truncation-aware median estimator, and averages the resulting
    thresholds with a bounded online mean.
``simfitpp_multi``
    Runs ``simfitpp`` over a sequence of pairs, warm-starting each from the
    running estimate, and filters the per-pair thresholds with a bounded
    online geometric mean.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import _seeding
from .distributions import chi2_cdf, chi2_pdf, chi2_quantile, chi_quantile
from .errors import DomainError, EstimationError, InsufficientDataError
from .geometry import ModelKind, minimal_sample_size, sampson_sq
from .ransac import RansacConfig, msac

__all__ = [
    "ScaleConfig",
    "ThresholdEstimate",
    "CorrectedSigma",
    "MeanFilter",
    "lower_median",
    "median_sigma",
    "tau_corrected_sigma",
    "online_mean_filter",
    "simfit",
    "simfitpp",
    "simfitpp_multi",
    "MIN_VAL_RESIDUALS",
]

# held-out residuals needed below the threshold for a scale update
MIN_VAL_RESIDUALS = 10
# tau^2 / median(r^2) at or below this admits no fixed point
CONVERGENCE_RATIO = 4.0
FIXEDPOINT_XTOL = 1e-3
MULTI_STABLE_PAIRS = 5


@dataclass(frozen=True)
class ScaleConfig:
    tau0: float = 1.0
    alpha: float = 0.99
    tau_min: float = 0.25
    tau_max: float = 8.0
    p_train: float = 0.5
    ftol: float = 0.01
    max_outer_iters: int = 4
    fixedpoint_iters: int = 5
    seed: int = 0
    model_kind: ModelKind = ModelKind.FUNDAMENTAL
    ransac_iterations: int = 500
    # early termination inside every MSAC call; None runs the full budget
    confidence: float | None = 0.9999
    refit_rounds: int = 10

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if not 0 < self.tau_min <= self.tau0 <= self.tau_max:
            raise DomainError("need 0 < tau_min <= tau0 <= tau_max")
        if not 0 < self.p_train < 1:
            raise DomainError("p_train must lie in (0, 1)")
        if not self.ftol > 0:
            raise DomainError("ftol must be > 0")
        if self.max_outer_iters < 1 or self.fixedpoint_iters < 1:
            raise DomainError("iteration caps must be >= 1")
        object.__setattr__(self, "model_kind", ModelKind.parse(self.model_kind))

    @property
    def tau_factor(self):
        return chi_quantile(self.alpha)

    def ransac(self, threshold, seed):
        return RansacConfig(threshold=threshold, max_iterations=self.ransac_iterations,
                            model_kind=self.model_kind, seed=seed,
                            confidence=self.confidence, refit_rounds=self.refit_rounds)


@dataclass(frozen=True)
class ThresholdEstimate:
    tau_star: float
    sigma_hat: float
    q_final: float
    outer_iters: int
    converged: bool
    accepted_estimates: tuple = ()
    # scale behind each accepted threshold, same order
    accepted_sigmas: tuple = ()
    skipped_iters: int = 0
    fallbacks: int = 0
    trace: tuple = field(default=(), repr=False)


class CorrectedSigma(NamedTuple):
    sigma: float
    q: float
    iterations: int
    converged: bool
    fallback: bool


def lower_median(values):
    """Median taking the lower-middle element for even sizes."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise InsufficientDataError("median of an empty sample")
    k = (v.size - 1) // 2
    return float(np.partition(v, k)[k])


def median_sigma(residuals_sq):
    """Median squared residual estimator ``sqrt(median(r^2) / F^-1(0.5))``."""
    return math.sqrt(lower_median(residuals_sq) / chi2_quantile(0.5))


def _fixed_point_map(u, ratio):
    # u = F^-1(q); returns F^-1(F(ratio * u) / 2) and its derivative
    g = chi2_quantile(0.5 * float(chi2_cdf(ratio * u)))
    dg = ratio * chi2_pdf(ratio * u) / (2.0 * chi2_pdf(g)) if g > 0 else math.nan
    return g, dg


def tau_corrected_sigma(residuals_sq, tau, max_iter=5, xtol=FIXEDPOINT_XTOL):
    """Scale estimate for residuals that already passed the threshold ``tau``.

    Solves ``sigma^2 = median(r^2) / F^-1(q)`` with ``q = F(tau^2 / sigma^2) / 2``
    starting from ``q = 0.5``. Each step applies the update map through a
    Newton step on its log-space fixed point, falling back to the plain
    update whenever that step is not usable. Stops after ``max_iter`` steps
    or when the relative change in sigma drops below ``xtol``.

    When ``tau^2 / median(r^2) <= 4`` no fixed point exists; the plain median
    estimate is returned with ``fallback=True``.
    """
    if not tau > 0:
        raise DomainError("tau must be > 0")
    med = lower_median(residuals_sq)
    u0 = chi2_quantile(0.5)
    if med == 0.0:
        return CorrectedSigma(0.0, 0.5, 0, True, False)
    ratio = tau * tau / med
    if not ratio > CONVERGENCE_RATIO:
        return CorrectedSigma(math.sqrt(med / u0), 0.5, 0, False, True)

    u = u0
    sigma = math.sqrt(med / u)
    converged = False
    k = 0
    for k in range(1, max_iter + 1):
        g, dg = _fixed_point_map(u, ratio)
        u_new = g
        slope = dg * u / g - 1.0 if g > 0 else math.nan
        if math.isfinite(slope) and slope < 0:
            cand = u * math.exp(-(math.log(g) - math.log(u)) / slope)
            if math.isfinite(cand) and cand > 0:
                u_new = cand
        if not (math.isfinite(u_new) and u_new > 0):
            return CorrectedSigma(math.sqrt(med / u0), 0.5, k, False, True)
        sigma_new = math.sqrt(med / u_new)
        change = abs(sigma_new - sigma) / sigma
        u, sigma = u_new, sigma_new
        if change < xtol:
            converged = True
            break
    return CorrectedSigma(sigma, float(chi2_cdf(u)), k, converged, False)


@dataclass(frozen=True)
class MeanFilter:
    """Online mean of accepted values; the prior is reported until one arrives."""

    prior: float
    accepted: tuple = ()
    geometric: bool = False

    @property
    def value(self):
        if not self.accepted:
            return self.prior
        a = np.asarray(self.accepted, dtype=float)
        if self.geometric:
            return float(np.exp(np.mean(np.log(a))))
        return float(np.mean(a))

    def update(self, candidate, lo, hi):
        if lo <= candidate <= hi:
            return replace(self, accepted=self.accepted + (float(candidate),))
        return self


def online_mean_filter(state, candidate, tau_min, tau_max):
    """Accept ``candidate`` into ``state`` only if it lies in ``[tau_min, tau_max]``."""
    return state.update(candidate, tau_min, tau_max)


def _require_size(matches, kind):
    s = minimal_sample_size(kind)
    if len(matches) < s:
        raise InsufficientDataError(f"need >= {s} matches, got {len(matches)}")


def simfit(matches, config):
    """Baseline alternation on a shrinking inlier set (no optional model shift).

    Every round refits MSAC on the current inliers from scratch, keeps those
    with ``r^2 <= tau^2``, and sets ``tau = chi_quantile(alpha) * median_sigma``
    on the kept fitting residuals. No bounds are applied.
    """
    _require_size(matches, config.model_kind)
    smin = minimal_sample_size(config.model_kind)
    factor = config.tau_factor
    tau = config.tau0
    idx = np.arange(len(matches))
    history = []
    converged = False
    it = 0
    for it in range(1, config.max_outer_iters + 1):
        if len(idx) < smin:
            break
        try:
            res = msac(matches.subset(idx),
                       config.ransac(tau, _seeding.derive_seed(config.seed, _seeding.SIMFIT, it)))
        except EstimationError:
            break
        keep = res.inlier_mask
        idx = idx[keep]
        if len(idx) == 0:
            break
        new = factor * median_sigma(res.residuals_sq[keep])
        history.append(new)
        change = abs(new - tau) / new if new > 0 else math.inf
        tau = new
        if tau == 0.0:
            break
        if change < config.ftol:
            converged = True
            break
    return ThresholdEstimate(
        tau_star=tau,
        sigma_hat=tau / factor,
        q_final=0.5,
        outer_iters=it,
        converged=converged,
        accepted_estimates=tuple(history),
        accepted_sigmas=tuple(h / factor for h in history),
    )


def split_sizes(n, p_train):
    n_train = int(round(p_train * n))
    return n_train, n - n_train


def train_val_split(n, p_train, seed, iteration):
    """Disjoint index arrays covering ``range(n)``."""
    n_train, _ = split_sizes(n, p_train)
    perm = _seeding.derive_rng(seed, _seeding.SPLIT, iteration).permutation(n)
    return perm[:n_train], perm[n_train:]


def simfitpp(matches, config):
    """Threshold from held-out, truncation-corrected scale estimates.

    Each round: split into train/val with proportions ``p_train``,
    ``1 - p_train``; run MSAC on train with the current threshold; keep the
    val residuals below it; estimate sigma with :func:`tau_corrected_sigma`;
    feed ``chi_quantile(alpha) * sigma`` to the bounded online mean. Rounds
    with fewer than ``MIN_VAL_RESIDUALS`` usable val residuals are skipped.
    Stops when an accepted update moves the threshold by less than ``ftol``
    (relative) or after ``max_outer_iters`` rounds.
    """
    kind = config.model_kind
    smin = minimal_sample_size(kind)
    n_train, n_val = split_sizes(len(matches), config.p_train)
    if n_train < smin or n_val < MIN_VAL_RESIDUALS:
        raise InsufficientDataError(
            f"{len(matches)} matches cannot give a train split of >= {smin} and a "
            f"validation split of >= {MIN_VAL_RESIDUALS} with p_train={config.p_train}"
        )
    factor = config.tau_factor
    filt = MeanFilter(config.tau0)
    tau = config.tau0
    sigmas = []
    q_final = 0.5
    skipped = fallbacks = 0
    converged = False
    trace = []
    it = 0
    for it in range(1, config.max_outer_iters + 1):
        train, val = train_val_split(len(matches), config.p_train, config.seed, it)
        try:
            res = msac(matches.subset(train),
                       config.ransac(tau, _seeding.derive_seed(config.seed, _seeding.RANSAC, it)))
        except EstimationError:
            skipped += 1
            trace.append(("skipped", tau))
            continue
        r2 = sampson_sq(res.model, matches.subset(val))
        r2 = r2[r2 <= tau * tau]
        if len(r2) < MIN_VAL_RESIDUALS:
            skipped += 1
            trace.append(("skipped", tau))
            continue
        cs = tau_corrected_sigma(r2, tau, max_iter=config.fixedpoint_iters)
        fallbacks += cs.fallback
        candidate = factor * cs.sigma
        before = len(filt.accepted)
        filt = filt.update(candidate, config.tau_min, config.tau_max)
        trace.append(("candidate", candidate))
        if len(filt.accepted) == before:
            continue
        sigmas.append(cs.sigma)
        q_final = cs.q
        new = filt.value
        change = abs(new - tau) / tau
        tau = new
        if change < config.ftol:
            converged = True
            break
    return ThresholdEstimate(
        tau_star=tau,
        sigma_hat=tau / factor,
        q_final=q_final,
        outer_iters=it,
        converged=converged,
        accepted_estimates=filt.accepted,
        accepted_sigmas=tuple(sigmas),
        skipped_iters=skipped,
        fallbacks=fallbacks,
        trace=tuple(trace),
    )


def _pair_config(config, index, tau0):
    return replace(config, tau0=tau0, seed=_seeding.derive_seed(config.seed, _seeding.PAIR, index))


def _run_pair(args):
    matches, config = args
    try:
        return simfitpp(matches, config)
    except (InsufficientDataError, EstimationError):
        return None


def simfitpp_multi(dataset, config, parallel=False, workers=None):
    """Dataset-level threshold from per-pair :func:`simfitpp` runs.

    Pairs are visited in the given order. Each run starts from the current
    dataset estimate, and every per-pair threshold with at least one accepted
    update enters a bounded online geometric mean. Stops once the estimate
    has moved by less than ``ftol`` for ``MULTI_STABLE_PAIRS`` consecutive
    accepted pairs, or when the dataset is exhausted.

    ``parallel=True`` selects a different estimator: all pairs start from
    ``config.tau0`` (no warm start), run in a process pool, and are filtered
    in dataset order with the same stopping rule.
    """
    dataset = list(dataset)
    if not dataset:
        raise InsufficientDataError("dataset is empty")
    factor = config.tau_factor
    filt = MeanFilter(config.tau0, geometric=True)
    tau = config.tau0
    stable = 0
    converged = False
    visited = 0
    failed = 0

    if parallel:
        jobs = [(m, _pair_config(config, i, config.tau0)) for i, m in enumerate(dataset)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = iter(list(pool.map(_run_pair, jobs)))
    else:
        results = None

    for i, matches in enumerate(dataset):
        visited = i + 1
        if results is not None:
            est = next(results)
        else:
            est = _run_pair((matches, _pair_config(config, i, tau)))
        if est is None or not est.accepted_estimates:
            failed += 1
            continue
        before = len(filt.accepted)
        filt = filt.update(est.tau_star, config.tau_min, config.tau_max)
        if len(filt.accepted) == before:
            continue
        new = filt.value
        stable = stable + 1 if abs(new - tau) / tau < config.ftol else 0
        tau = new
        if stable >= MULTI_STABLE_PAIRS:
            converged = True
            break
    return ThresholdEstimate(
        tau_star=tau,
        sigma_hat=tau / factor,
        q_final=0.5,
        outer_iters=visited,
        converged=converged,
        accepted_estimates=filt.accepted,
        accepted_sigmas=tuple(a / factor for a in filt.accepted),
        skipped_iters=failed,
    )
