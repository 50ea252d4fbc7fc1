"""MSAC hypothesize-and-verify for fundamental and essential matrices.

Minimal samples come from one seeded stream in fixed-size chunks, so sample
``k`` is the same no matter how many iterations are requested. Each chunk is
solved and scored as a batch; the best hypothesis is chosen by
``(score, iteration)``, which makes the result independent of batching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _seeding
from .errors import EstimationError, InsufficientDataError
from .geometry import (
    EpipolarModel,
    ModelKind,
    _eight_point_batch,
    _fit_normalized,
    _project_essential,
    _seven_point_batch,
    _unit,
    has_collinear_triple,
    hartley_normalize,
    homogeneous,
    minimal_sample_size,
    sampson_floor,
)

__all__ = ["RansacConfig", "RansacResult", "RefitOutcome", "msac", "refit_on_inliers",
           "msac_score"]

CHUNK = 64
# Sampson reweighting passes after the linear refit
REFIT_REWEIGHT_ITERS = 3


@dataclass(frozen=True)
class RansacConfig:
    threshold: float
    max_iterations: int = 500
    model_kind: ModelKind = ModelKind.FUNDAMENTAL
    seed: int = 0
    refit: bool = True
    # refit -> reselect inliers rounds; stops early once a round does not improve
    refit_rounds: int = 10
    # early termination confidence; None runs the full budget
    confidence: float | None = 0.9999

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold!r}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.confidence is not None and not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        object.__setattr__(self, "model_kind", ModelKind.parse(self.model_kind))


@dataclass(frozen=True, eq=False)
class RansacResult:
    model: EpipolarModel
    inlier_mask: np.ndarray
    residuals_sq: np.ndarray
    score: float
    iterations_run: int
    threshold: float
    refit_replaced: bool = False
    trace: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_inliers(self):
        return int(self.inlier_mask.sum())


@dataclass(frozen=True, eq=False)
class RefitOutcome:
    model: EpipolarModel
    score: float
    replaced: bool
    skipped: bool


def msac_score(residuals_sq, threshold):
    """Truncated quadratic cost ``sum(min(r^2, threshold^2))``."""
    return float(np.minimum(residuals_sq, threshold * threshold).sum())


class _Problem:
    """Per-call precomputation shared by sampling, solving and scoring."""

    def __init__(self, matches, kind):
        self.kind = kind
        self.matches = matches
        self.ha = homogeneous(matches.pts_a)
        self.hb = homogeneous(matches.pts_b)
        # models reaching residuals_sq are unit norm
        self.floor = sampson_floor(1.0, self.ha, self.hb)
        if kind is ModelKind.ESSENTIAL:
            if not matches.calibrated:
                raise ValueError("essential estimation needs intrinsics")
            xa, xb = matches.calibrated_points()
            self.Ka = matches.intrinsics_a.matrix
            self.Kb_inv_t = np.linalg.inv(matches.intrinsics_b.matrix).T
            self.Ka_inv = np.linalg.inv(self.Ka)
        else:
            xa, xb = matches.pts_a, matches.pts_b
        self.xa, self.xb = xa, xb
        self.Ta, self.na = hartley_normalize(xa)
        self.Tb, self.nb = hartley_normalize(xb)

    def solve(self, samples):
        """Hypotheses for (B, s) index samples: models in the solver's frame,
        pixel-space matrices, and the owning sample of each."""
        sa, sb = self.na[samples], self.nb[samples]
        good = ~(has_collinear_triple(sa) | has_collinear_triple(sb))
        keep = np.flatnonzero(good)
        if self.kind is ModelKind.FUNDAMENTAL:
            M, owner = _seven_point_batch(sa[keep], sb[keep])
            owner = keep[owner]
            M = _unit(self.Tb.T @ M @ self.Ta)
            return M, M, owner, good
        M, ok = _eight_point_batch(sa[keep], sb[keep])
        owner = keep[ok]
        E = _unit(_project_essential(self.Tb.T @ M[ok] @ self.Ta))
        return E, _unit(self.Kb_inv_t @ E @ self.Ka_inv), owner, good

    def residuals_sq(self, F):
        single = F.ndim == 2
        F = F.reshape(-1, 3, 3)
        m = len(F)
        # (3m, N) planes: rows of F x_a and of F^T x_b for every model
        Fa = (F.reshape(3 * m, 3) @ self.ha.T).reshape(m, 3, -1)
        Ftb = (np.swapaxes(F, 1, 2).reshape(3 * m, 3) @ self.hb.T).reshape(m, 3, -1)
        xb, yb = self.hb[:, 0], self.hb[:, 1]
        num = Fa[:, 0] * xb + Fa[:, 1] * yb + Fa[:, 2]
        den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            r2 = num * num / den
        r2[~(den > self.floor)] = np.inf
        return r2[0] if single else r2

    def pixel_matrix(self, model):
        if self.kind is ModelKind.ESSENTIAL:
            return _unit(self.Kb_inv_t @ model.matrix @ self.Ka_inv)
        return model.matrix

    def refit(self, mask):
        M = _fit_normalized(self.xa[mask], self.xb[mask], self.kind,
                            reweight_iters=REFIT_REWEIGHT_ITERS)
        return None if M is None else EpipolarModel(M, self.kind)


def _required_iterations(inlier_ratio, sample_size, confidence):
    w = inlier_ratio ** sample_size
    if w <= 0.0:
        return math.inf
    if w >= 1.0:
        return 1
    return math.ceil(math.log(1.0 - confidence) / math.log1p(-w))


def msac(matches, config, record_trace=False):
    """Best hypothesis under the truncated-quadratic (MSAC) cost.

    Residuals are squared signed-Sampson errors in pixels^2; a match is an
    inlier when ``r^2 <= threshold^2``. With ``config.refit`` the best
    hypothesis is refitted on its inliers and replaced if that lowers the
    score; refit and inlier reselection repeat for up to
    ``config.refit_rounds`` rounds while the score keeps dropping.
    ``record_trace`` keeps the best score of every iteration
    (``inf`` for degenerate samples).
    """
    kind = config.model_kind
    s = minimal_sample_size(kind)
    n = len(matches)
    if n < s:
        raise InsufficientDataError(f"need >= {s} matches for {kind.name.lower()} estimation, got {n}")
    prob = _Problem(matches, kind)
    thr2 = config.threshold ** 2
    rng = _seeding.derive_rng(config.seed, _seeding.RANSAC)

    best = (math.inf, -1)
    best_model = None
    best_r2 = None
    trace = [] if record_trace else None
    degenerate = 0
    done = 0
    limit = config.max_iterations
    while done < limit:
        # always draw full chunks so the stream does not depend on the limit
        samples = rng.random((CHUNK, n)).argpartition(s - 1, axis=1)[:, :s]
        b = min(CHUNK, limit - done)
        samples = samples[:b]
        models, pixel, owner, good = prob.solve(samples)
        degenerate += int(b - good.sum())
        it_score = np.full(b, math.inf)
        it_model = np.full(b, -1)
        if len(models):
            r2 = prob.residuals_sq(pixel)
            scores = np.minimum(r2, thr2).sum(axis=1)
            # per-iteration minimum, first solution on ties
            order = np.lexsort((np.arange(len(scores)), scores, owner))
            first = np.ones(len(order), dtype=bool)
            first[1:] = owner[order][1:] != owner[order][:-1]
            sel = order[first]
            it_score[owner[sel]] = scores[sel]
            it_model[owner[sel]] = sel
        stop_at = b
        running = best[0]
        for i in range(b):
            if it_score[i] < running:
                running = it_score[i]
                k = it_model[i]
                best = (running, done + i)
                best_model = models[k]
                best_r2 = r2[k]
            if config.confidence is not None and best_r2 is not None:
                ratio = np.count_nonzero(best_r2 <= thr2) / n
                if done + i + 1 >= _required_iterations(ratio, s, config.confidence):
                    stop_at = i + 1
                    break
        if record_trace:
            trace.extend(it_score[:stop_at])
        done += stop_at
        if stop_at < b:
            break

    if best_model is None:
        raise EstimationError(
            f"no non-degenerate sample in {done} iterations",
            {"iterations": done, "degenerate_samples": degenerate, "n_matches": n},
        )

    model = EpipolarModel(best_model, kind)
    score = best[0]
    r2 = best_r2
    replaced = False
    for _ in range(config.refit_rounds if config.refit else 0):
        out = refit_on_inliers(matches, model, r2 <= thr2, config.threshold, _problem=prob)
        if not out.replaced:
            break
        model, score, replaced = out.model, out.score, True
        r2 = prob.residuals_sq(prob.pixel_matrix(model))
    r2 = np.asarray(r2, dtype=float)
    return RansacResult(
        model=model,
        inlier_mask=r2 <= thr2,
        residuals_sq=r2,
        score=float(np.minimum(r2, thr2).sum()),
        iterations_run=done,
        threshold=config.threshold,
        refit_replaced=replaced,
        trace=np.asarray(trace) if record_trace else None,
    )


def refit_on_inliers(matches, model, mask, threshold, _problem=None):
    """Non-minimal refit of ``model`` on ``matches[mask]``.

    The refit replaces the model only if it lowers the MSAC score over all
    matches. Fewer than 8 inliers (or a degenerate fit) skips the refit and
    returns the input model with ``skipped=True``.
    """
    prob = _problem or _Problem(matches, model.kind)
    mask = np.asarray(mask, dtype=bool)
    thr2 = threshold ** 2
    before = float(np.minimum(prob.residuals_sq(prob.pixel_matrix(model)), thr2).sum())
    if mask.sum() < 8:
        return RefitOutcome(model, before, replaced=False, skipped=True)
    try:
        cand = prob.refit(mask)
    except ValueError:
        cand = None
    if cand is None:
        return RefitOutcome(model, before, replaced=False, skipped=True)
    after = float(np.minimum(prob.residuals_sq(prob.pixel_matrix(cand)), thr2).sum())
    if after < before:
        return RefitOutcome(cand, after, replaced=True, skipped=False)
    return RefitOutcome(model, before, replaced=False, skipped=False)
