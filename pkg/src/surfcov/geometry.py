"""Gaussian components, point clouds and correspondences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.utils import check_array

from .lie import PoseSE3

# index of (row, col) for each entry of the packed factor (l11, l21, l22, l31, l32, l33)
TRIL_ROWS = np.array([0, 1, 1, 2, 2, 2])
TRIL_COLS = np.array([0, 0, 1, 0, 1, 2])


def check_points(X, name="points", allow_empty=True):
    """Validate an ``(N, 3)`` array of finite coordinates."""
    X = check_array(
        X, dtype=np.float64, ensure_2d=True, ensure_min_samples=0 if allow_empty else 1,
        input_name=name,
    )
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {X.shape}")
    return X


def check_covariances(C, n=None, name="covariances"):
    C = np.asarray(C, dtype=float)
    if C.ndim != 3 or C.shape[1:] != (3, 3):
        raise ValueError(f"{name} must have shape (N, 3, 3), got {C.shape}")
    if n is not None and C.shape[0] != n:
        raise ValueError(f"{name} has {C.shape[0]} entries, expected {n}")
    if not np.all(np.isfinite(C)):
        raise ValueError(f"{name} contains non-finite values")
    return C


def cholesky_build(L):
    """Covariance ``L @ L.T`` from packed lower-triangular factors.

    Accepts a single 6-vector or an ``(N, 6)`` array.  The diagonal is not
    constrained, so any real input yields a PSD matrix.
    """
    L = np.asarray(L, dtype=float)
    single = L.ndim == 1
    L = np.atleast_2d(L)
    M = unpack_tril(L)
    C = M @ np.swapaxes(M, 1, 2)
    return C[0] if single else C


def unpack_tril(L):
    L = np.atleast_2d(np.asarray(L, dtype=float))
    M = np.zeros((L.shape[0], 3, 3))
    M[:, TRIL_ROWS, TRIL_COLS] = L
    return M


def pack_tril(M):
    M = np.asarray(M, dtype=float)
    return M[..., TRIL_ROWS, TRIL_COLS]


def residual(q, p, T):
    """Displacement ``q - (R p + t)``; works row-wise on ``(N, 3)`` arrays."""
    return np.asarray(q, dtype=float) - T.apply(p)


@dataclass(frozen=True)
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(3)
        cov = np.array(self.cov, dtype=float).reshape(3, 3)
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def factor(self):
        """Square-root factor ``F`` with ``F @ F.T == cov`` (eigenframe)."""
        w, V = np.linalg.eigh(0.5 * (self.cov + self.cov.T))
        return V * np.sqrt(np.clip(w, 0.0, None))


def transform_component(g, T_inv_of):
    """Express a world-frame component in the frame whose pose is ``T_inv_of``.

    ``mean' = R^T (mean - t)`` and ``cov' = R^T cov R``.
    """
    R, t = T_inv_of.rotation, T_inv_of.translation
    return GaussianComponent(R.T @ (g.mean - t), R.T @ g.cov @ R)


def sample_component(g, n, sigma_scale=1.0, rng_seed=0):
    if n < 0:
        raise ValueError("n must be non-negative")
    if sigma_scale <= 0:
        raise ValueError("sigma_scale must be positive")
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((n, 3))
    return g.mean + sigma_scale * z @ g.factor().T


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    covariances: np.ndarray | None = None

    def __post_init__(self):
        pts = check_points(self.points).copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.covariances is not None:
            C = check_covariances(self.covariances, len(pts)).copy()
            C.flags.writeable = False
            object.__setattr__(self, "covariances", C)

    def __len__(self):
        return len(self.points)

    def transformed(self, T):
        covs = None
        if self.covariances is not None:
            R = T.rotation
            covs = R @ self.covariances @ R.T
        return PointCloud(T.apply(self.points), covs)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Index pairs ``(source_idx, target_idx)``; repeated targets are allowed."""

    source_idx: np.ndarray
    target_idx: np.ndarray
    n_source: int | None = field(default=None, compare=False)
    n_target: int | None = field(default=None, compare=False)

    def __post_init__(self):
        s = np.array(self.source_idx, dtype=np.int64).reshape(-1)
        t = np.array(self.target_idx, dtype=np.int64).reshape(-1)
        if s.shape != t.shape:
            raise ValueError("source and target index arrays differ in length")
        for idx, n, label in ((s, self.n_source, "source"), (t, self.n_target, "target")):
            if len(idx) and (idx.min() < 0 or (n is not None and idx.max() >= n)):
                raise IndexError(f"{label} index out of range")
        s.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "source_idx", s)
        object.__setattr__(self, "target_idx", t)

    def __len__(self):
        return len(self.source_idx)

    @classmethod
    def identity(cls, n):
        idx = np.arange(n)
        return cls(idx, idx, n, n)

    def gather(self, P, Q):
        """Paired ``(p, q)`` arrays for the clouds ``P`` (source), ``Q`` (target)."""
        P = P.points if isinstance(P, PointCloud) else np.asarray(P, dtype=float)
        Q = Q.points if isinstance(Q, PointCloud) else np.asarray(Q, dtype=float)
        return P[self.source_idx], Q[self.target_idx]


def as_pose(T):
    if isinstance(T, PoseSE3):
        return T
    return PoseSE3.from_matrix(T)
