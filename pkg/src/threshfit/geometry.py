"""Two-view epipolar geometry.

Conventions: camera A sits at the origin, camera B at ``[R | t]``, so a
world point ``X`` (in A's frame) projects to ``pi(X)`` in A and to
``pi(R X + t)`` in B. Models ``M`` satisfy ``[x_b; 1]^T M [x_a; 1] = 0`` and
are stored with unit Frobenius norm.

Residuals are signed Sampson errors in pixels. Essential matrices are mapped
to pixel-space fundamental matrices before any residual is evaluated, so
thresholds mean the same thing for both model kinds.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    DomainError,
    InsufficientDataError,
    UndefinedResidualError,
)

__all__ = [
    "ModelKind",
    "CameraIntrinsics",
    "MatchSet",
    "EpipolarModel",
    "RelativePose",
    "hartley_normalize",
    "seven_point",
    "eight_point",
    "sampson_signed",
    "sampson_sq",
    "essential_to_pixel_fundamental",
    "essential_from_fundamental",
    "essential_from_pose",
    "decompose_essential",
    "pose_error",
    "pose_auc",
    "minimal_sample_size",
]

COLLINEAR_TOL = 1e-9
# Sampson gradient norms below this fraction of |F| |x| count as zero
SAMPSON_TOL = 1e-12


class ModelKind(str, enum.Enum):
    FUNDAMENTAL = "F"
    ESSENTIAL = "E"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper()
        aliases = {"F": cls.FUNDAMENTAL, "FUNDAMENTAL": cls.FUNDAMENTAL,
                   "E": cls.ESSENTIAL, "ESSENTIAL": cls.ESSENTIAL}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown model kind {value!r}") from None


def minimal_sample_size(kind):
    return 7 if ModelKind.parse(kind) is ModelKind.FUNDAMENTAL else 8


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")

    @property
    def matrix(self):
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def inverse(self):
        return np.linalg.inv(self.matrix)

    @classmethod
    def from_matrix(cls, K):
        K = np.asarray(K, dtype=float)
        if K.shape != (3, 3):
            raise ValueError("intrinsics matrix must be 3x3")
        if not np.allclose(K[2], [0.0, 0.0, 1.0]) or K[1, 0] != 0.0:
            raise DomainError("intrinsics matrix must be upper triangular with K[2,2] = 1")
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]),
                   float(K[0, 1]))

    def calibrate(self, pts):
        """Pixel coordinates (N, 2) to normalized camera coordinates (N, 2)."""
        h = homogeneous(pts) @ self.inverse.T
        return h[:, :2] / h[:, 2:]


def homogeneous(pts):
    pts = np.asarray(pts, dtype=float)
    return np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)


@dataclass(frozen=True, eq=False)
class MatchSet:
    """N correspondences ``pts_a[i] <-> pts_b[i]`` in pixels."""

    pts_a: np.ndarray
    pts_b: np.ndarray
    intrinsics_a: CameraIntrinsics | None = None
    intrinsics_b: CameraIntrinsics | None = None

    def __post_init__(self):
        a = np.array(self.pts_a, dtype=float).reshape(-1, 2)
        b = np.array(self.pts_b, dtype=float).reshape(-1, 2)
        if a.shape != b.shape:
            raise ValueError(f"point count mismatch: {len(a)} vs {len(b)}")
        if not (np.isfinite(a).all() and np.isfinite(b).all()):
            raise ValueError("point coordinates must be finite")
        if (self.intrinsics_a is None) != (self.intrinsics_b is None):
            raise ValueError("intrinsics must be given for both images or neither")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "pts_a", a)
        object.__setattr__(self, "pts_b", b)

    def __len__(self):
        return len(self.pts_a)

    @property
    def calibrated(self):
        return self.intrinsics_a is not None

    def subset(self, index):
        return MatchSet(self.pts_a[index], self.pts_b[index],
                        self.intrinsics_a, self.intrinsics_b)

    def calibrated_points(self):
        """Points in normalized camera coordinates."""
        if not self.calibrated:
            raise ValueError("match set has no intrinsics")
        return (self.intrinsics_a.calibrate(self.pts_a),
                self.intrinsics_b.calibrate(self.pts_b))


@dataclass(frozen=True, eq=False)
class EpipolarModel:
    matrix: np.ndarray
    kind: ModelKind = ModelKind.FUNDAMENTAL

    def __post_init__(self):
        M = np.array(self.matrix, dtype=float)
        if M.shape != (3, 3):
            raise ValueError("model matrix must be 3x3")
        norm = np.linalg.norm(M)
        if not np.isfinite(norm) or norm == 0.0:
            raise DegenerateConfigurationError("model matrix is zero or not finite")
        M = M / norm
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "kind", ModelKind.parse(self.kind))

    def pixel_fundamental(self, intrinsics_a=None, intrinsics_b=None):
        """Matrix acting on pixel coordinates."""
        if self.kind is ModelKind.FUNDAMENTAL:
            return self.matrix
        if intrinsics_a is None or intrinsics_b is None:
            raise ValueError("essential models need both intrinsics to act on pixels")
        return essential_to_pixel_fundamental(self, intrinsics_a, intrinsics_b).matrix


@dataclass(frozen=True, eq=False)
class RelativePose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
            raise DomainError("rotation must be orthonormal with det +1")
        n = np.linalg.norm(t)
        if n == 0:
            raise DomainError("translation must be non-zero")
        # leave vectors that are unit up to rounding alone, so that a saved
        # pose reloads bit for bit
        if abs(n - 1.0) > 4 * np.finfo(float).eps:
            t = t / n
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------


def hartley_normalize(points):
    """Similarity moving the centroid to 0 and the RMS radius to sqrt(2).

    Returns ``(T, normalized_points)`` with ``normalized = (T @ [p; 1])[:2]``.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(p) < 2:
        raise InsufficientDataError("normalization needs at least 2 points")
    c = p.mean(axis=0)
    rms = math.sqrt(np.mean(np.sum((p - c) ** 2, axis=1)))
    if rms <= 1e-12 * max(1.0, float(np.abs(c).max())):
        raise DegenerateConfigurationError("all points coincide")
    s = math.sqrt(2.0) / rms
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return T, (p - c) * s


def _design_rows(xa, xb):
    # rows of kron([xb; 1], [xa; 1]) for each correspondence, shape (..., n, 9)
    ha = homogeneous(xa)
    hb = homogeneous(xb)
    return (hb[..., :, None] * ha[..., None, :]).reshape(*ha.shape[:-1], 9)


_TRIPLES = {n: np.array(list(itertools.combinations(range(n), 3))) for n in (7, 8)}


def has_collinear_triple(pts, tol=COLLINEAR_TOL):
    """True where any 3 points of a (..., n, 2) sample are collinear.

    Tested on twice the triangle area, in the units of ``pts``; callers pass
    Hartley-normalized coordinates.
    """
    pts = np.asarray(pts, dtype=float)
    n = pts.shape[-2]
    triples = _TRIPLES.get(n)
    if triples is None:
        triples = np.array(list(itertools.combinations(range(n), 3)))
    p = pts[..., triples, :]
    d1 = p[..., 1, :] - p[..., 0, :]
    d2 = p[..., 2, :] - p[..., 0, :]
    area = np.abs(d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0])
    return (area < tol).any(axis=-1)


# ---------------------------------------------------------------------------
# Solvers (batched cores operate on normalized coordinates)
# ---------------------------------------------------------------------------

# det(l F1 + (1 - l) F2) is cubic in l; sampled at these nodes it is fitted
# exactly by the inverse Vandermonde matrix below
_CUBIC_NODES = np.array([-1.0, 0.0, 1.0, 2.0])
_CUBIC_FIT = np.linalg.inv(np.vander(_CUBIC_NODES, 4))


def _seven_point_batch(xa, xb):
    """Seven-point solutions for a batch of samples.

    ``xa``, ``xb``: (B, 7, 2). Returns ``(F, owner)`` with F of shape (K, 3, 3)
    (not yet unit norm) and ``owner[k]`` the sample index of solution k.
    Rank-deficient samples produce no solutions.
    """
    A = _design_rows(xa, xb)
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    ok = s[:, 6] > 1e-10 * s[:, 0]
    f1 = vt[:, 7].reshape(-1, 3, 3)
    f2 = vt[:, 8].reshape(-1, 3, 3)
    lam = _CUBIC_NODES[None, :, None, None]
    dets = np.linalg.det(lam * f1[:, None] + (1 - lam) * f2[:, None])
    coef = dets @ _CUBIC_FIT.T  # highest degree first
    sols, owner = [], []
    scale = np.abs(coef).max(axis=1)
    cubic = np.abs(coef[:, 0]) > 1e-12 * scale
    idx = np.flatnonzero(ok & cubic)
    if idx.size:
        c = coef[idx]
        comp = np.zeros((idx.size, 3, 3))
        comp[:, 0, :] = -c[:, 1:] / c[:, :1]
        comp[:, 1, 0] = 1.0
        comp[:, 2, 1] = 1.0
        roots = np.linalg.eigvals(comp)
        real = np.abs(roots.imag) <= 1e-10 * np.maximum(1.0, np.abs(roots.real))
        bi, ri = np.nonzero(real)
        lr = roots.real[bi, ri][:, None, None]
        b = idx[bi]
        sols.append(lr * f1[b] + (1 - lr) * f2[b])
        owner.append(b)
    for b in np.flatnonzero(ok & ~cubic):
        for r in np.roots(coef[b]):
            if abs(r.imag) <= 1e-10 * max(1.0, abs(r.real)):
                sols.append((r.real * f1[b] + (1 - r.real) * f2[b])[None])
                owner.append(np.array([b]))
    if not sols:
        return np.zeros((0, 3, 3)), np.zeros(0, dtype=int)
    return np.concatenate(sols), np.concatenate(owner)


def _eight_point_batch(xa, xb):
    """Least-squares null vectors for (B, n, 2) samples, n >= 8.

    Returns (B, 3, 3) matrices and a boolean mask of well-posed samples.
    """
    A = _design_rows(xa, xb)
    _, s, vt = np.linalg.svd(A, full_matrices=A.shape[-2] < 9)
    ok = s[..., 7] > 1e-10 * s[..., 0]
    return vt[..., 8, :].reshape(-1, 3, 3), ok


def _project_rank2(F):
    u, s, vt = np.linalg.svd(F)
    s = s.copy()
    s[..., 2] = 0.0
    return (u * s[..., None, :]) @ vt


def _project_essential(E):
    u, s, vt = np.linalg.svd(E)
    m = 0.5 * (s[..., 0] + s[..., 1])
    d = np.stack([m, m, np.zeros_like(m)], axis=-1)
    return (u * d[..., None, :]) @ vt


def _unit(M):
    return M / np.linalg.norm(M, axis=(-2, -1), keepdims=True)


def seven_point(matches):
    """All real fundamental matrices through exactly 7 correspondences."""
    if len(matches) != 7:
        raise InsufficientDataError("seven_point needs exactly 7 correspondences")
    Ta, na = hartley_normalize(matches.pts_a)
    Tb, nb = hartley_normalize(matches.pts_b)
    if has_collinear_triple(na) or has_collinear_triple(nb):
        raise DegenerateConfigurationError("sample contains 3 collinear points")
    F, _ = _seven_point_batch(na[None], nb[None])
    if len(F) == 0:
        raise DegenerateConfigurationError("seven-point design matrix is rank deficient")
    F = Tb.T @ F @ Ta
    return [EpipolarModel(f, ModelKind.FUNDAMENTAL) for f in _unit(F)]


def eight_point(matches, kind=ModelKind.FUNDAMENTAL):
    """Normalized linear fit on N >= 8 correspondences.

    For ``kind="E"`` the match set must carry intrinsics; the fit runs in
    normalized camera coordinates and is projected onto the essential
    manifold (singular values ``(s, s, 0)``). Otherwise the fit runs in pixels
    and is projected to rank 2.
    """
    kind = ModelKind.parse(kind)
    if len(matches) < 8:
        raise InsufficientDataError(f"eight_point needs >= 8 correspondences, got {len(matches)}")
    if kind is ModelKind.ESSENTIAL:
        xa, xb = matches.calibrated_points()
    else:
        xa, xb = matches.pts_a, matches.pts_b
    # planar scenes leave a rank-6 design matrix; they still get a model
    M = _fit_normalized(xa, xb, kind, min_rank=6)
    if M is None:
        raise DegenerateConfigurationError("eight-point design matrix is rank deficient")
    return EpipolarModel(M, kind)


def _fit_normalized(xa, xb, kind, reweight_iters=0, min_rank=8):
    """Linear fit in Hartley-normalized coordinates, optionally followed by
    Sampson reweighting: each pass rescales every design row by the inverse
    Sampson gradient norm under the previous model and solves again."""
    Ta, na = hartley_normalize(xa)
    Tb, nb = hartley_normalize(xb)
    A = _design_rows(na, nb)
    ha, hb = homogeneous(xa), homogeneous(xb)

    def solve(rows):
        _, s, vt = np.linalg.svd(rows, full_matrices=len(rows) < 9)
        if not s[min_rank - 1] > 1e-10 * s[0]:
            return None
        Mn = vt[8].reshape(3, 3)
        if kind is ModelKind.ESSENTIAL:
            return _unit(_project_essential(Tb.T @ Mn @ Ta))
        return _unit(Tb.T @ _project_rank2(Mn) @ Ta)

    M = solve(A)
    for _ in range(reweight_iters):
        if M is None:
            break
        Fa = ha @ M.T
        Ftb = hb @ M
        den = Fa[:, 0] ** 2 + Fa[:, 1] ** 2 + Ftb[:, 0] ** 2 + Ftb[:, 1] ** 2
        if not (den > 0).all():
            break
        nxt = solve(A / np.sqrt(den)[:, None])
        if nxt is None:
            break
        M = nxt
    return M


# ---------------------------------------------------------------------------
# Residuals
# ---------------------------------------------------------------------------


def sampson_signed_batch(F, pts_a, pts_b):
    """Signed Sampson errors of N matches under one or more pixel-space models.

    ``F`` is (3, 3) or (M, 3, 3); returns (N,) or (M, N). Entries whose
    denominator vanishes are NaN.
    """
    ha = homogeneous(pts_a)
    hb = homogeneous(pts_b)
    Fa = ha @ np.swapaxes(F, -1, -2)  # rows are F x_a
    Ftb = hb @ F  # rows are F^T x_b
    num = np.sum(hb * Fa, axis=-1)
    den = Fa[..., 0] ** 2 + Fa[..., 1] ** 2 + Ftb[..., 0] ** 2 + Ftb[..., 1] ** 2
    F = np.asarray(F, dtype=float)
    fro2 = np.sum(F * F, axis=(-2, -1))[..., None]
    defined = den > sampson_floor(fro2, ha, hb)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(defined, num / np.sqrt(den), np.nan)


def sampson_floor(fro2, ha, hb):
    """Squared gradient norm under which a Sampson residual is undefined."""
    scale = np.maximum(np.sum(ha * ha, axis=-1), np.sum(hb * hb, axis=-1))
    return SAMPSON_TOL**2 * fro2 * scale


def sampson_sq(model, matches):
    """Squared Sampson errors (pixels^2) of all matches; inf where undefined."""
    F = model.pixel_fundamental(matches.intrinsics_a, matches.intrinsics_b)
    r = sampson_signed_batch(F, matches.pts_a, matches.pts_b)
    return np.where(np.isnan(r), np.inf, r * r)


def sampson_signed(model, a, b, intrinsics_a=None, intrinsics_b=None):
    """Signed Sampson error of one correspondence, in pixels.

    The sign is the sign of the algebraic error ``[b; 1]^T M [a; 1]``.
    """
    F = model.pixel_fundamental(intrinsics_a, intrinsics_b)
    r = sampson_signed_batch(F, np.asarray(a, float)[None], np.asarray(b, float)[None])[0]
    if np.isnan(r):
        raise UndefinedResidualError("Sampson denominator vanishes at this correspondence")
    return float(r)


def essential_to_pixel_fundamental(E, intrinsics_a, intrinsics_b):
    """``F = Kb^-T E Ka^-1`` as a unit-norm fundamental model."""
    if E.kind is not ModelKind.ESSENTIAL:
        raise ValueError("expected an essential model")
    Ka, Kb = intrinsics_a.matrix, intrinsics_b.matrix
    if abs(np.linalg.det(Ka)) < 1e-300 or abs(np.linalg.det(Kb)) < 1e-300:
        raise DomainError("singular intrinsics")
    return EpipolarModel(np.linalg.solve(Kb.T, E.matrix) @ np.linalg.inv(Ka),
                         ModelKind.FUNDAMENTAL)


def essential_from_fundamental(F, intrinsics_a, intrinsics_b):
    """``E = Kb^T F Ka`` projected onto the essential manifold."""
    M = intrinsics_b.matrix.T @ F.matrix @ intrinsics_a.matrix
    return EpipolarModel(_project_essential(M), ModelKind.ESSENTIAL)


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(pose):
    return EpipolarModel(skew(pose.translation) @ pose.rotation, ModelKind.ESSENTIAL)


# ---------------------------------------------------------------------------
# Pose recovery and metrics
# ---------------------------------------------------------------------------


def _triangulate_depths(R, t, xa, xb):
    # linear triangulation; returns depths in camera A and camera B
    n = len(xa)
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t[:, None]])
    A = np.empty((n, 4, 4))
    A[:, 0] = xa[:, :1] * P1[2] - P1[0]
    A[:, 1] = xa[:, 1:2] * P1[2] - P1[1]
    A[:, 2] = xb[:, :1] * P2[2] - P2[0]
    A[:, 3] = xb[:, 1:2] * P2[2] - P2[1]
    X = np.linalg.svd(A)[2][:, -1]
    X = X[:, :3] / X[:, 3:]
    za = X[:, 2]
    zb = X @ R[2] + t[2]
    return za, zb


def decompose_essential(E, matches):
    """Relative pose from an essential matrix by the cheirality test.

    ``matches`` supplies the correspondences used for the test; if it carries
    intrinsics the points are calibrated first, otherwise they are taken as
    normalized camera coordinates already. Among the four candidate poses the
    one with the most points in front of both cameras wins; ties go to the
    first candidate.
    """
    if E.kind is not ModelKind.ESSENTIAL:
        raise ValueError("expected an essential model")
    if len(matches) < 1:
        raise InsufficientDataError("cheirality test needs at least one match")
    if matches.calibrated:
        xa, xb = matches.calibrated_points()
    else:
        xa, xb = matches.pts_a, matches.pts_b
    u, _, vt = np.linalg.svd(E.matrix)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    candidates = [(u @ W @ vt, t), (u @ W @ vt, -t), (u @ W.T @ vt, t), (u @ W.T @ vt, -t)]
    support = []
    for R, tt in candidates:
        za, zb = _triangulate_depths(R, tt, xa, xb)
        support.append(int(np.sum((za > 0) & (zb > 0))))
    best = int(np.argmax(support))
    if support[best] == 0:
        raise DegenerateConfigurationError("no pose candidate has points in front of both cameras")
    R, tt = candidates[best]
    return RelativePose(R, tt)


def rotation_angle_deg(R):
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return math.degrees(math.atan2(0.5 * np.linalg.norm(w), 0.5 * (np.trace(R) - 1.0)))


def pose_error(est, gt):
    """(rotation error, translation direction error) in degrees.

    The translation error ignores the sign of the direction.
    """
    rot = rotation_angle_deg(est.rotation @ gt.rotation.T)
    a, b = est.translation, gt.translation
    trans = math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), abs(float(a @ b))))
    return rot, trans


def pose_auc(errors, thresholds=(5.0, 10.0, 20.0)):
    """Area under the recall-vs-error curve up to each threshold, in percent.

    ``errors`` are per-pair pose errors in degrees (usually
    ``max(rot, trans)``); failures should be passed as ``inf``.
    """
    errors = np.sort(np.asarray(errors, dtype=float))
    n = len(errors)
    if n == 0:
        raise InsufficientDataError("pose_auc needs at least one error")
    recall = np.arange(1, n + 1) / n
    errors = np.concatenate([[0.0], errors])
    recall = np.concatenate([[0.0], recall])
    out = []
    for thr in thresholds:
        last = np.searchsorted(errors, thr)
        e = np.concatenate([errors[:last], [thr]])
        r = np.concatenate([recall[:last], [recall[last - 1]]])
        out.append(100.0 * np.trapezoid(r, x=e) / thr)
    return out
