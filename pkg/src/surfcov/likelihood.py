"""Negative log-likelihood terms, Gauss-Newton Hessian and the Laplace loss.

All terms drop the ``(2 pi)^3`` constants.  Residuals follow
``d = q - (R p + t)`` and are modelled as ``N(0, 2 C)`` where ``C`` is the
target point covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud
from .lie import hat, perturb, se3_log

EPS = 1e-8
SIGMA_ROT = 0.01
SIGMA_TRANS = 0.05


class NotPositiveDefinite(ValueError):
    """A matrix that must be positive definite is not."""


def default_gamma(sigma_rot=SIGMA_ROT, sigma_trans=SIGMA_TRANS):
    return np.diag([sigma_rot**2] * 3 + [sigma_trans**2] * 3)


@dataclass(frozen=True)
class EnergyBreakdown:
    corr_logdet: float
    corr_quadratic: float
    pose_logdet: float
    pose_quadratic: float
    total: float


def _regularize(C, eps):
    return np.asarray(C, dtype=float) + eps * np.eye(3)


def _slogdet_pd(M):
    sign, logdet = np.linalg.slogdet(M)
    if not (sign > 0) or not np.all(np.isfinite(logdet)):
        raise NotPositiveDefinite("matrix is singular or indefinite")
    return logdet


def pair_arrays(corr, clouds):
    """Paired ``(p, q)`` arrays for ``clouds = (P, Q)``."""
    P, Q = clouds
    if corr is None:
        P = P.points if isinstance(P, PointCloud) else np.asarray(P, dtype=float)
        Q = Q.points if isinstance(Q, PointCloud) else np.asarray(Q, dtype=float)
        return P.reshape(-1, 3), Q.reshape(-1, 3)
    return corr.gather(P, Q)


def inv3(A):
    """Inverse of one or many symmetric 3x3 matrices via the adjugate."""
    A = np.asarray(A, dtype=float)
    a, b, c = A[..., 0, 0], A[..., 0, 1], A[..., 0, 2]
    d, e, f = A[..., 1, 1], A[..., 1, 2], A[..., 2, 2]
    adj = np.empty(A.shape)
    adj[..., 0, 0] = d * f - e * e
    adj[..., 0, 1] = adj[..., 1, 0] = c * e - b * f
    adj[..., 0, 2] = adj[..., 2, 0] = b * e - c * d
    adj[..., 1, 1] = a * f - c * c
    adj[..., 1, 2] = adj[..., 2, 1] = b * c - a * e
    adj[..., 2, 2] = a * d - b * b
    det = a * adj[..., 0, 0] + b * adj[..., 0, 1] + c * adj[..., 0, 2]
    if np.any(~(det > 0)):
        raise NotPositiveDefinite("covariance singular after regularization")
    return adj / det[..., None, None]


def weights_from_cov(C, eps=EPS):
    """``W = (2 C + 2 eps I)^-1`` for one or many covariances."""
    C = _regularize(C, eps)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    return inv3(2.0 * C)


def correspondence_terms(D, C, eps=EPS):
    """Per-pair ``(0.5 log|2C|, 0.5 d^T (2C)^-1 d)`` for stacked residuals."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    C2 = 2.0 * _regularize(np.asarray(C, dtype=float).reshape(-1, 3, 3), eps)
    sign, logdet = np.linalg.slogdet(C2)
    if np.any(sign <= 0):
        raise NotPositiveDefinite("covariance singular after regularization")
    sol = np.linalg.solve(C2, D[..., None])[..., 0]
    return 0.5 * logdet, 0.5 * np.einsum("ij,ij->i", D, sol)


def correspondence_nll(d, C, eps=EPS):
    logdet, quad = correspondence_terms(np.reshape(d, (1, 3)), np.reshape(C, (1, 3, 3)), eps)
    return float(logdet[0] + quad[0])


def correspondence_grad_cov(D, C, eps=EPS):
    """Gradient of each pair's NLL with respect to its own covariance.

    ``0.5 C^-1 - W d d^T W`` with ``W = (2C)^-1`` (regularized ``C``).
    """
    D = np.atleast_2d(np.asarray(D, dtype=float))
    Creg = _regularize(np.asarray(C, dtype=float).reshape(-1, 3, 3), eps)
    Cinv = np.linalg.inv(Creg)
    Wd = 0.5 * np.einsum("nij,nj->ni", Cinv, D)
    return 0.5 * Cinv - Wd[:, :, None] * Wd[:, None, :]


def pose_twist(T, T_tilde):
    return se3_log(T.inverse() @ T_tilde)


def pose_nll(T, T_tilde, Gamma):
    xi = pose_twist(T, T_tilde)
    return float(0.5 * xi @ np.linalg.solve(Gamma, xi))


def pose_nll_grad_twist(xi, Gamma):
    """Gradient of ``0.5 xi^T Gamma^-1 xi`` with respect to ``xi``."""
    return np.linalg.solve(Gamma, np.asarray(xi, dtype=float))


def energy(T, corr, clouds, C_list, T_tilde, Gamma, eps=EPS, use_pose_likelihood=True):
    p, q = pair_arrays(corr, clouds)
    C = np.asarray(C_list, dtype=float).reshape(-1, 3, 3)
    if len(C) != len(p):
        raise ValueError(f"{len(C)} covariances for {len(p)} correspondences")
    if len(p):
        logdet, quad = correspondence_terms(q - T.apply(p), C, eps)
        corr_logdet, corr_quad = float(np.sum(logdet)), float(np.sum(quad))
    else:
        corr_logdet = corr_quad = 0.0
    if use_pose_likelihood:
        pose_quad = pose_nll(T, T_tilde, Gamma)
        pose_logdet = 0.5 * float(_slogdet_pd(Gamma))
    else:
        pose_quad = pose_logdet = 0.0
    # the pose log-determinant is a constant for fixed Gamma; it is reported
    # for reconciliation but kept out of the total
    total = corr_logdet + corr_quad + pose_quad
    return EnergyBreakdown(corr_logdet, corr_quad, pose_logdet, pose_quad, total)


def residual_jacobian(p, T):
    """``d(residual)/d(xi)`` under ``T @ exp(xi)``: ``[R [p]x | -R]``.

    ``p`` may be ``(3,)`` (returns ``(3, 6)``) or ``(N, 3)`` (returns ``(N, 3, 6)``).
    """
    p = np.asarray(p, dtype=float)
    R = T.rotation
    if p.ndim == 1:
        return np.hstack([R @ hat(p), -R])
    P = np.zeros((len(p), 3, 3))
    P[:, 0, 1], P[:, 0, 2] = -p[:, 2], p[:, 1]
    P[:, 1, 0], P[:, 1, 2] = p[:, 2], -p[:, 0]
    P[:, 2, 0], P[:, 2, 1] = -p[:, 1], p[:, 0]
    J = np.empty((len(p), 3, 6))
    J[:, :, :3] = R @ P
    J[:, :, 3:] = -R
    return J


def gn_hessian(T_hat, corr, clouds, C_list, Gamma, eps=EPS, include_prior=True):
    """``sum J^T (2C)^-1 J + Gamma^-1``.

    ``Gamma=None`` (or ``include_prior=False``) leaves out the prior summand.
    """
    p, _ = pair_arrays(corr, clouds)
    H = np.zeros((6, 6))
    if len(p):
        J = residual_jacobian(p, T_hat)
        W = weights_from_cov(np.asarray(C_list, dtype=float).reshape(-1, 3, 3), eps)
        H += np.einsum("nai,nab,nbj->ij", J, W, J, optimize=True)
    if include_prior and Gamma is not None:
        H += np.linalg.inv(Gamma)
    return 0.5 * (H + H.T)


def fd_energy_hessian(T_hat, corr, clouds, C_list, T_tilde, Gamma, step=1e-4, eps=EPS):
    """Full Hessian of the energy in the right-perturbation twist, by central differences."""

    def f(xi):
        return energy(perturb(T_hat, xi), corr, clouds, C_list, T_tilde, Gamma, eps).total

    H = np.zeros((6, 6))
    E = np.eye(6) * step
    f0 = f(np.zeros(6))
    for i in range(6):
        for j in range(i, 6):
            if i == j:
                val = (f(E[i]) - 2 * f0 + f(-E[i])) / step**2
            else:
                val = (
                    f(E[i] + E[j]) - f(E[i] - E[j]) - f(-E[i] + E[j]) + f(-E[i] - E[j])
                ) / (4 * step**2)
            H[i, j] = H[j, i] = val
    return H


def hessian_logdet(H):
    return float(_slogdet_pd(H))


def laplace_loss(T_hat, corr, clouds, C_list, T_tilde, Gamma, use_pose_likelihood=True, eps=EPS):
    """``0.5 log|H(T_hat)| + energy(T_hat)``.

    With ``use_pose_likelihood=False`` the pose terms and the prior summand
    of the Hessian are both left out.
    """
    H = gn_hessian(T_hat, corr, clouds, C_list, Gamma, eps, include_prior=use_pose_likelihood)
    try:
        half_logdet = 0.5 * hessian_logdet(H)
    except NotPositiveDefinite as exc:
        raise NotPositiveDefinite("Gauss-Newton Hessian is not positive definite") from exc
    e = energy(T_hat, corr, clouds, C_list, T_tilde, Gamma, eps, use_pose_likelihood)
    return half_logdet + e.total


__all__ = [
    "EnergyBreakdown",
    "NotPositiveDefinite",
    "correspondence_grad_cov",
    "correspondence_nll",
    "correspondence_terms",
    "default_gamma",
    "energy",
    "fd_energy_hessian",
    "gn_hessian",
    "hessian_logdet",
    "laplace_loss",
    "pose_nll",
    "pose_nll_grad_twist",
    "pose_twist",
    "residual_jacobian",
    "weights_from_cov",
]
