"""Scan matching with and without covariances, odometry and trajectory metrics.

All matchers return the pose ``T`` mapping the source cloud ``P`` into the
frame of the target ``Q``.  Costs are evaluated with nearest-neighbour
association at the current pose, so every reported cost trace refers to a
single well-defined function of the pose; Gauss-Newton matchers backtrack
until that cost does not increase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, check_covariances, check_points
from .lie import PoseSE3, rotation_error, se3_exp, se3_log
from .likelihood import residual_jacobian

SUCCESS_DEG = 10.0
# slack for round-off in the recovered angle; the threshold itself is inclusive
SUCCESS_SLACK_DEG = 1e-9
VOXEL_SMALL = 0.2
VOXEL_LARGE = 1.0
MAX_HALVINGS = 10


class MatchError(ValueError):
    pass


class DegenerateCloud(MatchError):
    pass


class OdometryError(RuntimeError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass
class MatchResult:
    pose: PoseSE3
    iterations: int
    final_cost: float
    converged: bool
    cost_trace: list = field(default_factory=list)
    pose_trace: list = field(default_factory=list, repr=False)


def _points(X, name):
    X = X.points if isinstance(X, PointCloud) else X
    X = check_points(X, name, allow_empty=False)
    return X


def _check_spread(X, name):
    s = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if len(X) < 3 or s[0] == 0 or s[-1] < 1e-9 * s[0]:
        raise DegenerateCloud(f"{name} does not span three dimensions")


def _step_size(T_old, T_new):
    return float(np.linalg.norm(se3_log(T_old.inverse() @ T_new)))


class _Associator:
    """Nearest target for each transformed source point, optionally gated."""

    def __init__(self, Q, max_distance):
        self.tree = cKDTree(Q)
        self.max_distance = max_distance

    def __call__(self, X):
        dist, idx = self.tree.query(X, k=1)
        return idx, dist <= self.max_distance


def kabsch(p, q, w=None):
    """Least-squares rigid ``T`` with ``T p ~ q``."""
    w = np.ones(len(p)) if w is None else np.asarray(w, dtype=float)
    ws = w.sum()
    mp = (w[:, None] * p).sum(axis=0) / ws
    mq = (w[:, None] * q).sum(axis=0) / ws
    H = ((p - mp) * w[:, None]).T @ (q - mq)
    U, _, Vt = np.linalg.svd(H)
    S = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ S @ U.T
    return PoseSE3(R, mq - R @ mp)


# ---------------------------------------------------------------- point to point


def _p2p_cost(T, P, Q, assoc):
    X = T.apply(P)
    idx, ok = assoc(X)
    d2 = np.sum((Q[idx] - X) ** 2, axis=1)
    cap = assoc.max_distance**2
    return float(np.sum(np.where(ok, d2, cap))), idx, ok


def icp_point2point(P, Q, init=None, max_iter=50, tol=1e-10, max_distance=np.inf):
    """Alternating nearest neighbours and closed-form alignment.

    The cost is the truncated sum ``sum min(|T p - q_nn|^2, max_distance^2)``,
    which neither step can increase.
    """
    P = _points(P, "P")
    Q = _points(Q, "Q")
    _check_spread(P, "P")
    _check_spread(Q, "Q")
    T = init if init is not None else PoseSE3.identity()
    assoc = _Associator(Q, max_distance)
    cost, idx, ok = _p2p_cost(T, P, Q, assoc)
    trace, poses = [cost], [T]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if ok.sum() < 3:
            raise MatchError("fewer than three correspondences within max_distance")
        T_new = kabsch(P[ok], Q[idx[ok]])
        new_cost, idx, ok = _p2p_cost(T_new, P, Q, assoc)
        delta = _step_size(T, T_new)
        T, cost = T_new, new_cost
        trace.append(cost)
        poses.append(T)
        if delta < tol:
            converged = True
            break
    return MatchResult(T, it, cost, converged, trace, poses)


# ---------------------------------------------------------------- Gauss-Newton matchers


def _gn_match(cost_fn, system_fn, T, max_iter, tol, inner_iter=1, inner_tol=0.0):
    """Shared outer loop: associate, solve, backtrack on the associated cost.

    ``cost_fn(T) -> (cost, state)`` evaluates the cost with fresh
    association; ``system_fn(T, state) -> (g, H)`` returns the
    gradient and Gauss-Newton matrix at ``T`` for the pairs in ``state``.
    """
    cost, state = cost_fn(T)
    trace, poses = [cost], [T]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # inner Gauss-Newton on the pairs fixed by the current association
        T_in = T
        for _ in range(inner_iter):
            g, H = system_fn(T_in, state)
            try:
                step = -np.linalg.solve(H, g)
            except np.linalg.LinAlgError as exc:
                raise MatchError("Gauss-Newton system is singular") from exc
            T_in = T_in @ se3_exp(step)
            if np.linalg.norm(step) < inner_tol:
                break
        xi = se3_log(T.inverse() @ T_in)
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            T_try = T @ se3_exp(xi)
            c_try, s_try = cost_fn(T_try)
            if c_try <= cost:
                accepted = True
                break
            xi = 0.5 * xi
        if not accepted:
            converged = bool(np.linalg.norm(xi) < tol)
            break
        delta = float(np.linalg.norm(xi))
        T, cost, state = T_try, c_try, s_try
        trace.append(cost)
        poses.append(T)
        if delta < tol:
            converged = True
            break
    return MatchResult(T, it, cost, converged, trace, poses)


def icp_point2plane(P, Q, target_normals, init=None, max_iter=50, tol=1e-10, max_distance=np.inf):
    """Gauss-Newton on ``sum (n^T (q - T p))^2`` over nearest-neighbour pairs."""
    P = _points(P, "P")
    Q = _points(Q, "Q")
    N = np.asarray(target_normals, dtype=float)
    if N.shape != Q.shape:
        raise ValueError("need one normal per target point")
    if not np.allclose(np.linalg.norm(N, axis=1), 1.0, atol=1e-6):
        raise ValueError("normals must be unit length")
    _check_spread(P, "P")
    _check_spread(Q, "Q")
    assoc = _Associator(Q, max_distance)
    cap = max_distance**2

    def cost_fn(T):
        X = T.apply(P)
        idx, ok = assoc(X)
        r = np.einsum("ij,ij->i", N[idx], Q[idx] - X)
        return float(np.sum(np.where(ok, r**2, cap))), (idx, ok)

    def system_fn(T, state):
        idx, ok = state
        p, q, n = P[ok], Q[idx[ok]], N[idx[ok]]
        r = np.einsum("ij,ij->i", n, q - T.apply(p))
        Jr = np.einsum("na,nai->ni", n, residual_jacobian(p, T))
        return Jr.T @ r, Jr.T @ Jr

    T0 = init if init is not None else PoseSE3.identity()
    return _gn_match(cost_fn, system_fn, T0, max_iter, tol)


def fused_covariances(C_p, C_q, R, eps=1e-8, fused=True):
    """``C_q + R C_p R^T + eps I`` (or ``2 C_q + eps I`` when not fused)."""
    if fused:
        M = C_q + R @ C_p @ R.T
    else:
        M = 2.0 * C_q
    M = M + eps * np.eye(3)
    w = np.linalg.eigvalsh(M)
    if np.any(w[:, 0] <= 0):
        raise MatchError("fused covariance is singular after regularization")
    return M


def gicp_cost_terms(T, p, q, Cp, Cq, eps=1e-8, fused=True):
    """Per-pair ``d^T M^-1 d`` and the pieces of one Gauss-Newton system.

    ``M`` is evaluated at ``T`` and held fixed for the derivatives.
    """
    d = q - T.apply(p)
    Minv = np.linalg.inv(fused_covariances(Cp, Cq, T.rotation, eps, fused))
    Md = np.einsum("nab,nb->na", Minv, d)
    J = residual_jacobian(p, T)
    g = 2.0 * np.einsum("nai,na->i", J, Md)
    H = 2.0 * np.einsum("nai,nab,nbj->ij", J, Minv, J, optimize=True)
    return np.einsum("na,na->n", d, Md), g, H


def gicp_align(P, Q, C_p, C_q, init=None, max_iter=50, tol=1e-10, max_distance=np.inf,
               eps=1e-8, fused=True, inner_iter=20, inner_tol=1e-13):
    """Covariance-weighted alignment with the fused per-pair covariance.

    Each outer iteration re-associates, runs Gauss-Newton on the fixed pairs
    with the fused covariance refreshed at every step, then backtracks on
    the associated cost.
    """
    P = _points(P, "P")
    Q = _points(Q, "Q")
    C_p = check_covariances(C_p, len(P), "C_p")
    C_q = check_covariances(C_q, len(Q), "C_q")
    _check_spread(P, "P")
    _check_spread(Q, "Q")
    assoc = _Associator(Q, max_distance)

    def cost_fn(T):
        X = T.apply(P)
        idx, ok = assoc(X)
        M = fused_covariances(C_p, C_q[idx], T.rotation, eps, fused)
        d = Q[idx] - X
        r = np.einsum("na,na->n", d, np.linalg.solve(M, d[..., None])[..., 0])
        if not ok.all():
            # a gated pair costs the most any pair at the gate distance could
            cap = max_distance**2 / np.linalg.eigvalsh(M)[:, 0]
            r = np.where(ok, r, cap)
        return float(r.sum()), (idx, ok)

    def system_fn(T, state):
        idx, ok = state
        _, g, H = gicp_cost_terms(T, P[ok], Q[idx[ok]], C_p[ok], C_q[idx[ok]], eps, fused)
        return 0.5 * g, 0.5 * H

    T0 = init if init is not None else PoseSE3.identity()
    return _gn_match(cost_fn, system_fn, T0, max_iter, tol, inner_iter, inner_tol)


# ---------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("one timestamp per pose required")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)


def save_trajectory(path, traj):
    """One line per pose: ``t tx ty tz r11 r12 ... r33`` (row-major rotation)."""
    with open(path, "w") as fh:
        for t, T in zip(traj.timestamps, traj.poses):
            vals = [t, *T.translation, *T.rotation.reshape(-1)]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def load_trajectory(path):
    stamps, poses = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 13:
                raise ValueError(f"line {lineno}: expected 13 values, got {len(parts)}")
            v = np.array([float(x) for x in parts])
            stamps.append(v[0])
            poses.append(PoseSE3(v[4:].reshape(3, 3), v[1:4]))
    return Trajectory(np.array(stamps), poses)


def odometry(scans, covs=None, matcher="gicp", timestamps=None, max_iter=50, tol=1e-8,
             max_distance=np.inf, normals=None):
    """Chain pairwise alignments of consecutive scans into world poses.

    Each pair ``(k-1, k)`` is initialised with the previous relative motion.
    """
    if len(scans) < 2:
        raise ValueError("odometry needs at least two scans")
    if matcher not in ("point2point", "point2plane", "gicp"):
        raise ValueError(f"unknown matcher {matcher!r}")
    if matcher == "gicp" and covs is None:
        raise ValueError("gicp needs per-scan covariances")
    if matcher == "point2plane" and normals is None:
        raise ValueError("point2plane needs per-scan normals")
    scans = [_points(s, f"scan {k}") for k, s in enumerate(scans)]
    stamps = np.arange(len(scans), dtype=float) if timestamps is None else np.asarray(timestamps, dtype=float)
    poses = [PoseSE3.identity()]
    rel = PoseSE3.identity()
    for k in range(1, len(scans)):
        try:
            if matcher == "point2point":
                res = icp_point2point(scans[k], scans[k - 1], rel, max_iter, tol, max_distance)
            elif matcher == "point2plane":
                res = icp_point2plane(scans[k], scans[k - 1], normals[k - 1], rel, max_iter, tol, max_distance)
            else:
                res = gicp_align(scans[k], scans[k - 1], covs[k], covs[k - 1], rel, max_iter, tol, max_distance)
        except (MatchError, np.linalg.LinAlgError) as exc:
            raise OdometryError(f"pair {k - 1}->{k}: {exc}", Trajectory(stamps[:k], poses)) from exc
        rel = res.pose
        poses.append(poses[-1] @ rel)
    return Trajectory(stamps, poses)


def rpe(estimated, reference, delta=100):
    """RMSE of translation norm and rotation angle of relative-pose errors."""
    n = len(estimated)
    if len(reference) != n:
        raise ValueError("trajectories differ in length")
    if n <= delta:
        raise ValueError(f"trajectory length {n} must exceed delta {delta}")
    te, re = [], []
    for i in range(n - delta):
        A = estimated.poses[i].inverse() @ estimated.poses[i + delta]
        B = reference.poses[i].inverse() @ reference.poses[i + delta]
        E = B.inverse() @ A
        te.append(np.linalg.norm(E.translation))
        re.append(rotation_error(A.rotation, B.rotation))
    return float(np.sqrt(np.mean(np.square(te)))), float(np.sqrt(np.mean(np.square(re))))


def success_rate(results, references, threshold_deg=SUCCESS_DEG):
    """Fraction of results whose rotation is within ``threshold_deg`` of the reference."""
    if len(results) != len(references):
        raise ValueError("results and references differ in length")
    if not results:
        return 0.0
    ok = 0
    for r, ref in zip(results, references):
        T = r.pose if isinstance(r, MatchResult) else r
        if np.degrees(rotation_error(T.rotation, ref.rotation)) <= threshold_deg + SUCCESS_SLACK_DEG:
            ok += 1
    return ok / len(results)


def voxel_downsample(points, voxel=VOXEL_SMALL):
    """Centroid of the points in each occupied voxel, ordered by voxel index."""
    X = check_points(points)
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    if len(X) == 0:
        return X
    keys = np.floor(X / voxel).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inv, X)
    return sums / np.bincount(inv)[:, None]
