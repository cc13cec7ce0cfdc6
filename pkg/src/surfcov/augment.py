"""Scan densification by sampling each point's Gaussian."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .geometry import PointCloud, check_covariances, check_points

# (samples per point, sigma scale) recipes
DENSIFY_LIGHT = (7, 0.05)
DENSIFY_WIDE = (50, 0.3)
DENSIFY_TIGHT = (40, 0.1)


@dataclass(frozen=True)
class AugmentSpec:
    samples_per_point: int = DENSIFY_LIGHT[0]
    sigma_scale: float = DENSIFY_LIGHT[1]
    include_original: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if int(self.samples_per_point) != self.samples_per_point or self.samples_per_point < 0:
            raise ValueError("samples_per_point must be a non-negative integer")
        if not self.sigma_scale > 0:
            raise ValueError("sigma_scale must be positive")

    def output_size(self, n):
        return n * (self.samples_per_point + int(self.include_original))


def eigenframes(points, covs):
    """Eigenvalues and sign-fixed eigenvectors that rotate with the cloud.

    The two smallest-eigenvalue axes point away from the cloud centroid
    (non-negative dot product with ``x_i - centroid``); the third completes a
    right-handed frame.  Frames are only unique for distinct eigenvalues.
    """
    w, V = np.linalg.eigh(0.5 * (covs + np.swapaxes(covs, 1, 2)))
    off = points - points.mean(axis=0)
    for j in (0, 1):
        s = np.einsum("ni,ni->n", V[:, :, j], off)
        V[:, :, j] *= np.where(s < 0, -1.0, 1.0)[:, None]
    V[:, :, 2] = np.cross(V[:, :, 0], V[:, :, 1])
    return np.clip(w, 0.0, None), V


def augment_scan(cloud, covs, spec):
    """Originals first (optional), then ``k`` samples per point grouped by point.

    Point ``i`` draws from ``N(x_i, sigma_scale^2 C_i)`` with its own
    generator seeded by ``(rng_seed, i)``.
    """
    X = cloud.points if isinstance(cloud, PointCloud) else check_points(cloud)
    C = check_covariances(covs, len(X))
    k = int(spec.samples_per_point)
    parts = [X] if spec.include_original else []
    if k and len(X):
        w, V = eigenframes(X, C)
        F = V * np.sqrt(w)[:, None, :]
        Z = np.stack([np.random.default_rng([spec.rng_seed, i]).standard_normal((k, 3)) for i in range(len(X))])
        S = X[:, None, :] + spec.sigma_scale * np.einsum("nij,nkj->nki", F, Z)
        parts.append(S.reshape(-1, 3))
    if not parts:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.vstack(parts))


class ScanAugmenter(TransformerMixin, BaseEstimator):
    """Densify clouds; covariances come from ``covariance_estimator`` when not given."""

    def __init__(self, samples_per_point=DENSIFY_LIGHT[0], sigma_scale=DENSIFY_LIGHT[1],
                 include_original=True, rng_seed=0, covariance_estimator=None):
        self.samples_per_point = samples_per_point
        self.sigma_scale = sigma_scale
        self.include_original = include_original
        self.rng_seed = rng_seed
        self.covariance_estimator = covariance_estimator

    def fit(self, X, y=None):
        check_points(X)
        self.spec_ = AugmentSpec(self.samples_per_point, self.sigma_scale, self.include_original, self.rng_seed)
        self.n_features_in_ = 3
        return self

    def transform(self, X, covariances=None):
        if not hasattr(self, "spec_"):
            self.fit(X)
        X = check_points(X)
        if covariances is None:
            if self.covariance_estimator is None:
                from .estimators import PCACovariance

                est = PCACovariance()
            else:
                est = self.covariance_estimator
            covariances = est.fit(X).transform(X)
        return augment_scan(X, covariances, self.spec_).points
