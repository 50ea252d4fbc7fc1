import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from conftest import exact_pair
from threshfit.errors import DomainError, InsufficientDataError
from threshfit.geometry import MatchSet
from threshfit.scale import (
    MeanFilter,
    ScaleConfig,
    _pair_config,
    lower_median,
    median_sigma,
    online_mean_filter,
    simfit,
    simfitpp,
    simfitpp_multi,
    split_sizes,
    tau_corrected_sigma,
    train_val_split,
)
from threshfit.synthetic import generate_scene, scene_suite

Q_HALF = 0.45493642311957283  # scipy.stats.chi2.ppf(0.5, 1)
CHI_Q_99 = 2.5758293035489004  # scipy.stats.norm.ppf(0.995)


def brute_force_sigma(med, tau):
    """Solve 2 F(u) = F(ratio u) for u = F^-1(q) with scipy's chi2 and brentq."""
    ratio = tau * tau / med
    chi = stats.chi2(1)
    u = optimize.brentq(lambda u: chi.cdf(ratio * u) - 2 * chi.cdf(u), 1e-12, Q_HALF,
                        xtol=1e-15, rtol=1e-15)
    return math.sqrt(med / u), chi.cdf(u)


def _truncated(rng, n, sigma, tau):
    out = np.empty(0)
    while len(out) < n:
        z = (sigma * rng.standard_normal(2 * n)) ** 2
        out = np.concatenate([out, z[z <= tau * tau]])
    return out[:n]


# -- configuration ------------------------------------------------------------

def test_config_defaults_and_validation():
    c = ScaleConfig()
    assert (c.alpha, c.tau_min, c.tau_max, c.p_train, c.ftol) == (0.99, 0.25, 8.0, 0.5, 0.01)
    assert (c.max_outer_iters, c.fixedpoint_iters) == (4, 5)
    assert c.tau_factor == pytest.approx(CHI_Q_99, rel=1e-12)
    for bad in (dict(tau0=9.0), dict(tau0=0.1), dict(p_train=1.0), dict(ftol=0.0),
                dict(alpha=1.0), dict(max_outer_iters=0)):
        with pytest.raises(DomainError):
            ScaleConfig(**bad)


# -- median estimators --------------------------------------------------------

def test_lower_median():
    assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0
    assert lower_median([5.0, 1.0, 3.0]) == 3.0
    with pytest.raises(InsufficientDataError):
        lower_median([])


def test_median_sigma_examples():
    assert median_sigma([0.454936]) == pytest.approx(1.0, abs=1e-6)
    assert median_sigma([Q_HALF]) == pytest.approx(1.0, rel=1e-14)
    with pytest.raises(InsufficientDataError):
        median_sigma([])


@given(st.floats(min_value=1e-8, max_value=1e8))
def test_median_sigma_single_sample(a):
    assert median_sigma([a]) == pytest.approx(math.sqrt(a / Q_HALF), rel=1e-13)


def test_median_sigma_consistency():
    for seed in range(20):
        r2 = (2.0 * np.random.default_rng(seed).standard_normal(100_000)) ** 2
        assert 1.98 <= median_sigma(r2) <= 2.02


# -- truncation-corrected estimator ---------------------------------------------

@pytest.mark.parametrize("ratio", [5.0, 10.0, 100.0])
def test_corrected_matches_brute_force(ratio):
    r2 = np.random.default_rng(int(ratio)).standard_normal(10_001) ** 2
    med = lower_median(r2)
    tau = math.sqrt(ratio * med)
    cs = tau_corrected_sigma(r2, tau)
    sigma, q = brute_force_sigma(med, tau)
    assert cs.converged and not cs.fallback
    assert cs.iterations <= 5
    assert cs.sigma == pytest.approx(sigma, rel=1e-6)
    assert cs.q == pytest.approx(q, rel=1e-6)
    # fixed-point identity F^-1(2q) / F^-1(q) = tau^2 / median
    chi = stats.chi2(1)
    assert abs(chi.ppf(2 * cs.q) / chi.ppf(cs.q) - ratio) < 1e-6 * ratio


def test_corrected_large_ratio_limit():
    r2 = np.random.default_rng(8).standard_normal(5_001) ** 2
    tau = math.sqrt(100 * lower_median(r2))
    cs = tau_corrected_sigma(r2, tau)
    assert cs.q == pytest.approx(0.5, abs=1e-6)
    assert cs.sigma == pytest.approx(median_sigma(r2), rel=1e-3)


def test_truncation_bias_is_removed():
    r2 = _truncated(np.random.default_rng(21), 100_000, 1.0, 1.5)
    assert median_sigma(r2) < 0.9
    assert tau_corrected_sigma(r2, 1.5).sigma == pytest.approx(1.0, rel=0.03)


@pytest.mark.parametrize("ratio", [4.0, 3.0, 1.0])
def test_non_convergent_regime_falls_back(ratio):
    r2 = np.array([1.0, 1.0, 1.0])
    cs = tau_corrected_sigma(r2, math.sqrt(ratio))
    assert cs.fallback and not cs.converged
    assert cs.sigma == pytest.approx(median_sigma(r2))
    assert math.isfinite(cs.sigma) and cs.q == 0.5


def test_corrected_near_boundary_is_finite():
    for ratio in (4.0 + 1e-9, 4.001, 4.1, 4.5):
        cs = tau_corrected_sigma([1.0], math.sqrt(ratio))
        assert math.isfinite(cs.sigma) and cs.sigma > 0
        assert 0 < cs.q <= 0.5


def test_corrected_errors():
    with pytest.raises(DomainError):
        tau_corrected_sigma([1.0], 0.0)
    with pytest.raises(InsufficientDataError):
        tau_corrected_sigma([], 1.0)
    assert tau_corrected_sigma([0.0, 0.0, 1.0], 2.0).sigma == 0.0


# -- filters ----------------------------------------------------------------

def test_online_mean_filter_examples():
    s = online_mean_filter(MeanFilter(1.0), 2.0, 0.25, 8.0)
    assert s.value == 2.0
    assert online_mean_filter(s, 9.0, 0.25, 8.0).value == 2.0
    assert MeanFilter(1.0, (1.0, 3.0)).value == 2.0
    # the prior is reported until something is accepted, never averaged in
    assert MeanFilter(4.0).value == 4.0
    assert MeanFilter(4.0).update(1.0, 0.25, 8.0).value == 1.0


def test_geometric_filter_example():
    f = MeanFilter(3.0, geometric=True).update(1.0, 0.25, 8).update(4.0, 0.25, 8)
    assert f.value == pytest.approx(2.0, rel=1e-15)


@settings(max_examples=100)
@given(st.lists(st.floats(min_value=0.25, max_value=8.0), min_size=1, max_size=40))
def test_geometric_filter_identity(values):
    f = MeanFilter(1.0, geometric=True)
    for v in values:
        f = f.update(v, 0.25, 8.0)
    assert abs(math.log(f.value) - math.fsum(map(math.log, values)) / len(values)) < 1e-12


# -- splits ---------------------------------------------------------------

@given(st.integers(2, 2000), st.floats(0.05, 0.95), st.integers(0, 2**40), st.integers(1, 9))
def test_train_val_partition(n, p, seed, it):
    train, val = train_val_split(n, p, seed, it)
    assert len(np.intersect1d(train, val)) == 0
    assert np.array_equal(np.sort(np.concatenate([train, val])), np.arange(n))
    assert (len(train), len(val)) == split_sizes(n, p)


def test_splits_differ_by_iteration():
    a, _ = train_val_split(100, 0.5, 3, 1)
    b, _ = train_val_split(100, 0.5, 3, 2)
    assert not np.array_equal(np.sort(a), np.sort(b))


# -- SIMFIT / SIMFIT++ ------------------------------------------------------

@pytest.fixture(scope="module")
def scene():
    return generate_scene(scene_suite(1, seed=404)[0])


def test_simfit_deterministic(scene):
    cfg = ScaleConfig(tau0=4.0, seed=3)
    a, b = simfit(scene.matches, cfg), simfit(scene.matches, cfg)
    assert a == b


def test_simfit_noiseless_collapses(rng):
    m, *_ = exact_pair(rng, 200)
    est = simfit(m, ScaleConfig(tau0=4.0))
    assert est.tau_star < 1e-6
    assert est.tau_star >= 0.0


def test_simfit_relation(scene):
    est = simfit(scene.matches, ScaleConfig(tau0=4.0, seed=1))
    assert est.sigma_hat * CHI_Q_99 == pytest.approx(est.tau_star, rel=1e-12)


def test_simfitpp_deterministic(scene):
    cfg = ScaleConfig(tau0=2.0, seed=11)
    assert simfitpp(scene.matches, cfg) == simfitpp(scene.matches, cfg)
    assert simfitpp(scene.matches, cfg) != simfitpp(scene.matches, replace(cfg, seed=12))


def test_simfitpp_candidates_follow_alpha(scene):
    est = simfitpp(scene.matches, ScaleConfig(tau0=4.0, seed=2, max_outer_iters=6,
                                              ftol=1e-9))
    assert len(est.accepted_estimates) >= 2
    for tau, sigma in zip(est.accepted_estimates, est.accepted_sigmas):
        assert tau == pytest.approx(CHI_Q_99 * sigma, rel=1e-6)
    assert est.tau_star == pytest.approx(np.mean(est.accepted_estimates), rel=1e-12)
    assert 0.25 <= est.tau_star <= 8.0


def test_simfitpp_accepts_other_alpha(scene):
    est = simfitpp(scene.matches, ScaleConfig(alpha=0.95, tau0=3.0, seed=2))
    factor = stats.norm.ppf(0.975)
    for tau, sigma in zip(est.accepted_estimates, est.accepted_sigmas):
        assert tau == pytest.approx(factor * sigma, rel=1e-6)


def test_simfitpp_precondition(rng):
    m, *_ = exact_pair(rng, 15)
    with pytest.raises(InsufficientDataError):
        simfitpp(m, ScaleConfig())


def test_simfitpp_all_skipped_returns_tau0():
    rng = np.random.default_rng(0)
    junk = MatchSet(rng.uniform(0, 640, (300, 2)), rng.uniform(0, 480, (300, 2)))
    est = simfitpp(junk, ScaleConfig(tau0=0.25, tau_min=0.25))
    assert est.skipped_iters == 4
    assert est.accepted_estimates == ()
    assert est.tau_star == 0.25 and not est.converged


def test_simfit_below_simfitpp_on_average():
    """SIMFIT's fitting-set median is biased low relative to SIMFIT++ (100 scenes)."""
    diffs = []
    for i, spec in enumerate(scene_suite(100, seed=8)):
        m = generate_scene(spec).matches
        cfg = ScaleConfig(tau0=4.0, seed=i, confidence=None)
        diffs.append(simfitpp(m, cfg).tau_star - simfit(m, cfg).tau_star)
    assert np.mean(diffs) > 0


_RATIO_CASES = [(s, t) for s in (0.5, 1.0, 2.0) for t in (0.5, 4.0)]


@pytest.mark.slow
@pytest.mark.parametrize("sigma, tau0", [
    c if c != (2.0, 0.5) else pytest.param(*c, marks=pytest.mark.xfail(
        strict=True, reason="starting at 0.1x the optimal threshold, four outer "
        "iterations of the arithmetic-mean filter cannot recover; see decisions ledger"))
    for c in _RATIO_CASES])
def test_simfitpp_scale_ratio_200_scenes(sigma, tau0):
    scenes = [generate_scene(s) for s in scene_suite(200, seed=77, sigma=sigma)]
    cfg = ScaleConfig(tau0=tau0, confidence=None)
    ratio = [simfitpp(sc.matches, replace(cfg, seed=i)).sigma_hat / sigma
             for i, sc in enumerate(scenes)]
    assert 0.9 <= np.median(ratio) <= 1.1


# -- multi-pair --------------------------------------------------------------

@pytest.fixture(scope="module")
def pairs():
    return [generate_scene(s).matches for s in scene_suite(8, seed=505)]


def test_multi_single_pair_is_identity(pairs):
    cfg = ScaleConfig(tau0=3.0, seed=4)
    multi = simfitpp_multi(pairs[:1], cfg)
    single = simfitpp(pairs[0], _pair_config(cfg, 0, 3.0))
    assert multi.tau_star == pytest.approx(single.tau_star, rel=1e-14)
    assert multi.accepted_estimates == (single.tau_star,)


def test_multi_is_geometric_mean_of_accepted(pairs):
    est = simfitpp_multi(pairs, ScaleConfig(tau0=3.0, seed=4))
    logs = np.log(est.accepted_estimates)
    assert abs(math.log(est.tau_star) - logs.mean()) < 1e-12
    assert 0.25 <= est.tau_star <= 8.0
    assert est == simfitpp_multi(pairs, ScaleConfig(tau0=3.0, seed=4))


def test_multi_parallel_mode_is_cold_start(pairs):
    cfg = ScaleConfig(tau0=3.0, seed=4)
    par = simfitpp_multi(pairs[:4], cfg, parallel=True, workers=2)
    cold = [simfitpp(m, _pair_config(cfg, i, 3.0)).tau_star for i, m in enumerate(pairs[:4])]
    assert par.accepted_estimates == tuple(cold)
    assert par.tau_star == pytest.approx(math.exp(np.mean(np.log(cold))), rel=1e-12)


def test_multi_failures(rng):
    with pytest.raises(InsufficientDataError):
        simfitpp_multi([], ScaleConfig())
    tiny = [exact_pair(rng, 15)[0] for _ in range(3)]
    est = simfitpp_multi(tiny, ScaleConfig(tau0=2.0))
    assert est.tau_star == 2.0 and not est.converged and est.accepted_estimates == ()
