"""Synthetic two-view scenes with known pose, noise level and outlier labels.

Inliers are exact projections of 3D points, uniform in volume inside camera
A's frustum between two depths and visible in camera B, with i.i.d. Gaussian
pixel noise added to both projections. Outliers are independent uniform
points in both images.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import _seeding
from .errors import DegenerateConfigurationError, DomainError, InsufficientDataError
from .formats import CellSummary, MatchPair, ResultRow
from .geometry import (
    CameraIntrinsics,
    MatchSet,
    ModelKind,
    RelativePose,
    decompose_essential,
    essential_from_fundamental,
    essential_from_pose,
    essential_to_pixel_fundamental,
    pose_auc,
    pose_error,
    rotation_angle_deg,
    sampson_signed_batch,
)
from .ransac import msac
from .scale import ScaleConfig, simfit, simfitpp, simfitpp_multi

__all__ = [
    "SceneSpec",
    "LabeledMatchSet",
    "DEFAULT_INTRINSICS",
    "random_pose",
    "generate_scene",
    "scene_suite",
    "METHODS",
    "Case",
    "SweepResult",
    "recover_pose",
    "run_method",
    "sweep_benchmark",
]

METHODS = ("fixed", "simfit", "simfitpp", "simfitpp-multi")

DEFAULT_INTRINSICS = CameraIntrinsics(800.0, 800.0, 320.0, 240.0)
MAX_POINT_ROUNDS = 200
MAX_OUTLIER_ROUNDS = 20


@dataclass(frozen=True, eq=False)
class SceneSpec:
    n_points: int
    sigma: float
    outlier_fraction: float
    pose: RelativePose
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    depth_range: tuple[float, float] = (4.0, 12.0)
    image_size: tuple[int, int] = (640, 480)
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 16:
            raise DomainError("scenes need at least 16 points")
        if not 0 <= self.outlier_fraction < 1:
            raise DomainError("outlier_fraction must lie in [0, 1)")
        if self.sigma < 0:
            raise DomainError("sigma must be >= 0")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise DomainError("depth_range must satisfy 0 < min < max")


@dataclass(frozen=True, eq=False)
class LabeledMatchSet:
    matches: MatchSet
    inlier_labels: np.ndarray
    gt_pose: RelativePose
    gt_sigma: float
    # noise-free inlier projections, NaN rows for outliers
    clean_a: np.ndarray = field(repr=False, default=None)
    clean_b: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.matches)

    @property
    def gt_essential(self):
        return essential_from_pose(self.gt_pose)

    @property
    def gt_fundamental(self):
        return essential_to_pixel_fundamental(
            self.gt_essential, self.matches.intrinsics_a, self.matches.intrinsics_b
        )

    def gt_model(self, kind=ModelKind.FUNDAMENTAL):
        if ModelKind.parse(kind) is ModelKind.ESSENTIAL:
            return self.gt_essential
        return self.gt_fundamental


def _rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def random_pose(rng, target_depth=8.0, max_rotation_deg=30.0, max_tilt_deg=5.0,
                max_roll_deg=20.0):
    """Unit-baseline pose whose second camera looks at a common scene point.

    Camera B is placed on the unit sphere around A and aimed at
    ``(0, 0, target_depth)``, then rolled about its optical axis and tilted
    slightly. Poses rotating more than ``max_rotation_deg`` are redrawn.
    """
    target = np.array([0.0, 0.0, target_depth])
    while True:
        center = rng.normal(size=3)
        center /= np.linalg.norm(center)
        z = target - center
        z /= np.linalg.norm(z)
        x = np.cross([0.0, 1.0, 0.0], z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        roll = math.radians(rng.uniform(-max_roll_deg, max_roll_deg))
        R = _rotation_about([0, 0, 1], roll) @ R
        tilt = math.radians(rng.uniform(0, max_tilt_deg))
        R = _rotation_about(rng.normal(size=3), tilt) @ R
        if rotation_angle_deg(R) <= max_rotation_deg:
            return RelativePose(R, -R @ center)


def _sample_points(rng, spec, count):
    K = spec.intrinsics.matrix
    Kinv = np.linalg.inv(K)
    R, t = spec.pose.rotation, spec.pose.translation
    w, h = spec.image_size
    d0, d1 = spec.depth_range
    out_a, out_b = [], []
    have = 0
    batch = max(4 * count, 256)
    for _ in range(MAX_POINT_ROUNDS):
        if have >= count:
            break
        uv = rng.uniform([0.0, 0.0], [w, h], size=(batch, 2))
        # depth density proportional to d^2: uniform in frustum volume
        u = rng.uniform(size=batch)
        depth = (d0**3 + u * (d1**3 - d0**3)) ** (1.0 / 3.0)
        X = (np.c_[uv, np.ones(batch)] @ Kinv.T) * depth[:, None]
        Xb = X @ R.T + t
        ok = Xb[:, 2] > 1e-6
        pb = (Xb[ok] / Xb[ok, 2:]) @ K.T
        inside = (pb[:, 0] >= 0) & (pb[:, 0] <= w) & (pb[:, 1] >= 0) & (pb[:, 1] <= h)
        out_a.append(uv[ok][inside])
        out_b.append(pb[inside, :2])
        have += int(inside.sum())
    if have < count:
        raise DegenerateConfigurationError(
            "could not place enough points visible in both images; "
            "pose and depth range are inconsistent with the image bounds"
        )
    return np.concatenate(out_a)[:count], np.concatenate(out_b)[:count]


def generate_scene(spec):
    """Draw a labeled match set from ``spec``; deterministic per seed."""
    rng = _seeding.derive_rng(spec.seed, _seeding.SCENE)
    n_out = int(round(spec.outlier_fraction * spec.n_points))
    n_in = spec.n_points - n_out
    clean_a, clean_b = _sample_points(rng, spec, n_in)
    noisy_a = clean_a + spec.sigma * rng.normal(size=clean_a.shape)
    noisy_b = clean_b + spec.sigma * rng.normal(size=clean_b.shape)

    w, h = spec.image_size
    F = essential_to_pixel_fundamental(
        essential_from_pose(spec.pose), spec.intrinsics, spec.intrinsics
    ).matrix
    out_a = out_b = np.zeros((0, 2))
    for _ in range(MAX_OUTLIER_ROUNDS):
        out_a = rng.uniform([0.0, 0.0], [w, h], size=(n_out, 2))
        out_b = rng.uniform([0.0, 0.0], [w, h], size=(n_out, 2))
        if n_out == 0:
            break
        r = np.abs(sampson_signed_batch(F, out_a, out_b))
        if np.nanmedian(r) > 10.0 * spec.sigma:
            break
    else:
        raise DegenerateConfigurationError("outliers are not separated from the inlier noise")

    perm = rng.permutation(spec.n_points)
    pts_a = np.concatenate([noisy_a, out_a])[perm]
    pts_b = np.concatenate([noisy_b, out_b])[perm]
    labels = np.concatenate([np.ones(n_in, bool), np.zeros(n_out, bool)])[perm]
    nan = np.full((n_out, 2), np.nan)
    return LabeledMatchSet(
        matches=MatchSet(pts_a, pts_b, spec.intrinsics, spec.intrinsics),
        inlier_labels=labels,
        gt_pose=spec.pose,
        gt_sigma=float(spec.sigma),
        clean_a=np.concatenate([clean_a, nan])[perm],
        clean_b=np.concatenate([clean_b, nan])[perm],
    )


def scene_suite(n_scenes, seed, sigma=1.0, n_points=500, outlier_fraction=0.3,
                depth_range=(4.0, 12.0), intrinsics=DEFAULT_INTRINSICS,
                image_size=(640, 480), max_rotation_deg=30.0):
    """``n_scenes`` scene specs with poses and seeds derived from ``seed``."""
    specs = []
    for i in range(n_scenes):
        rng = _seeding.derive_rng(seed, _seeding.POSE, i)
        pose = random_pose(rng, target_depth=0.5 * sum(depth_range),
                           max_rotation_deg=max_rotation_deg)
        specs.append(SceneSpec(
            n_points=n_points, sigma=sigma, outlier_fraction=outlier_fraction,
            pose=pose, intrinsics=intrinsics, depth_range=tuple(depth_range),
            image_size=tuple(image_size), seed=_seeding.derive_seed(seed, _seeding.SCENE, i),
        ))
    return specs


# ---------------------------------------------------------------------------
# Benchmark sweeps
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Case:
    pair_id: str
    matches: MatchSet
    gt_pose: RelativePose | None = None


@dataclass
class SweepResult:
    rows: list
    cells: list

    def cell(self, method, tau0):
        for c in self.cells:
            if c.method == method and c.tau0 == tau0:
                return c
        raise KeyError((method, tau0))


def _as_case(index, item):
    if isinstance(item, Case):
        return item
    if isinstance(item, SceneSpec):
        item = generate_scene(item)
    if isinstance(item, LabeledMatchSet):
        return Case(f"scene{index:04d}", item.matches, item.gt_pose)
    if isinstance(item, MatchPair):
        return Case(item.id, item.matches, item.gt_pose)
    if isinstance(item, MatchSet):
        return Case(f"pair{index:04d}", item)
    raise TypeError(f"cannot benchmark a {type(item).__name__}")


def recover_pose(model, matches, inlier_mask):
    """Relative pose of an estimated model, using its inliers for cheirality."""
    if not matches.calibrated:
        return None
    if model.kind is ModelKind.FUNDAMENTAL:
        model = essential_from_fundamental(model, matches.intrinsics_a, matches.intrinsics_b)
    support = matches.subset(inlier_mask) if inlier_mask.any() else matches
    return decompose_essential(model, support)


def _estimate(method, matches, config):
    if method == "simfit":
        return simfit(matches, config)
    if method == "simfitpp":
        return simfitpp(matches, config)
    raise ValueError(f"unknown method {method!r}")


def run_method(case, method, tau0, config, seed, index, multi=None, record_timing=False):
    """Threshold estimation followed by a final MSAC from scratch and pose scoring.

    ``multi`` supplies the dataset-level estimate for ``simfitpp-multi``.
    Failures become rows with an ``error`` field.
    """
    row = ResultRow(pair_id=case.pair_id, method=method, tau0=float(tau0))
    start = time.perf_counter()
    try:
        if method == "fixed":
            tau = float(tau0)
        else:
            if method == "simfitpp-multi":
                est = multi
            else:
                cfg = replace(config, tau0=float(tau0),
                              seed=_seeding.derive_seed(seed, _seeding.PAIR, index))
                est = _estimate(method, case.matches, cfg)
            tau = est.tau_star
            row.sigma_hat = est.sigma_hat
            row.converged = est.converged
        row.tau_star = tau
        if not tau > 0:
            raise InsufficientDataError("estimated threshold collapsed to zero")
        res = msac(case.matches, config.ransac(tau, _seeding.derive_seed(seed, _seeding.FINAL, index)))
        row.n_inliers = res.n_inliers
        if case.gt_pose is not None:
            pose = recover_pose(res.model, case.matches, res.inlier_mask)
            if pose is not None:
                row.rot_err_deg, row.trans_err_deg = pose_error(pose, case.gt_pose)
    except (ValueError, RuntimeError) as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    if record_timing:
        row.runtime_ms = 1000.0 * (time.perf_counter() - start)
    return row


def _run_job(args):
    return run_method(*args)


def _summarize(rows, method, tau0, has_gt):
    cell = [r for r in rows if r.method == method and r.tau0 == tau0]
    failed = sum(r.error is not None for r in cell)
    aucs = pose_auc([r.pose_err_deg for r in cell]) if has_gt and cell else [None] * 3
    taus = [r.tau_star for r in cell if r.tau_star is not None and r.error is None]
    sig = [r.sigma_hat for r in cell if r.sigma_hat is not None]
    return CellSummary(
        method=method, tau0=float(tau0), n_pairs=len(cell), n_failed=failed,
        auc5=aucs[0], auc10=aucs[1], auc20=aucs[2],
        tau_star_median=float(np.median(taus)) if taus else None,
        sigma_hat_mean=float(np.mean(sig)) if sig else None,
        sigma_hat_median=float(np.median(sig)) if sig else None,
    )


def sweep_benchmark(items, tau0_grid, methods=METHODS, config=None, seed=0, workers=1,
                    record_timing=False):
    """Run every (method, tau0) cell over all pairs.

    ``items`` may be scene specs, labeled scenes, match pairs or cases.
    Returns per-pair rows (ordered by method, tau0, pair) and one summary per
    cell with pose AUC at 5/10/20 degrees over pairs that have ground truth.
    Per-pair failures are recorded, never raised.
    """
    items = list(items)
    tau0_grid = [float(t) for t in tau0_grid]
    methods = list(methods)
    if not items:
        raise InsufficientDataError("sweep needs at least one scene")
    if not tau0_grid or not methods:
        raise InsufficientDataError("sweep needs non-empty method and threshold grids")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    config = config or ScaleConfig()
    cases = [_as_case(i, it) for i, it in enumerate(items)]
    has_gt = all(c.gt_pose is not None and c.matches.calibrated for c in cases)

    jobs = []
    for method in methods:
        for tau0 in tau0_grid:
            multi = None
            if method == "simfitpp-multi":
                multi = simfitpp_multi([c.matches for c in cases],
                                       replace(config, tau0=tau0, seed=seed))
            for i, case in enumerate(cases):
                jobs.append((case, method, tau0, config, seed, i, multi, record_timing))
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_job, jobs, chunksize=8))
    else:
        rows = [_run_job(j) for j in jobs]
    cells = [_summarize(rows, m, t, has_gt) for m in methods for t in tau0_grid]
    return SweepResult(rows, cells)
