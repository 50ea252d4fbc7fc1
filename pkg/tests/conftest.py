import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from threshfit.geometry import CameraIntrinsics, MatchSet

K_TEST = CameraIntrinsics(700.0, 720.0, 310.0, 250.0)


def project(K, X):
    x = X @ K.matrix.T
    return x[:, :2] / x[:, 2:]


def exact_pair(rng, n, R=None, t=None, K=K_TEST, planar=False):
    """Noise-free correspondences of random points in front of both cameras.

    Built with scipy rotations and plain pinhole projection, independent of
    the package's scene generator. Returns (MatchSet, R, t, points).
    """
    if R is None:
        R = Rotation.from_rotvec(rng.normal(0, 0.15, 3)).as_matrix()
    if t is None:
        t = np.array([1.0, 0.1, 0.05]) + rng.normal(0, 0.1, 3)
    X = np.column_stack([rng.uniform(-3, 3, n), rng.uniform(-2, 2, n), rng.uniform(5, 10, n)])
    if planar:
        X[:, 2] = 7.0 + 0.2 * X[:, 0] - 0.1 * X[:, 1]
    Xb = X @ R.T + t
    assert (Xb[:, 2] > 0).all()
    return MatchSet(project(K, X), project(K, Xb), K, K), R, t, X


def fundamental_oracle(R, t, K=K_TEST):
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    Ki = np.linalg.inv(K.matrix)
    F = Ki.T @ tx @ R @ Ki
    return F / np.linalg.norm(F)


def algebraic(F, matches):
    ha = np.column_stack([matches.pts_a, np.ones(len(matches))])
    hb = np.column_stack([matches.pts_b, np.ones(len(matches))])
    return np.einsum("ni,ij,nj->n", hb, F, ha)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
