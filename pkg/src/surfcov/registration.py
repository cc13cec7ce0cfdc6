"""Globally optimal weighted registration through a semidefinite relaxation.

The pose is lifted to ``x = (h, vec(R), t)`` with ``vec`` stacking columns,
so that the weighted residual cost becomes ``x^T Q x`` under quadratic
constraints.  The relaxation is solved by :mod:`surfcov.sdp`; when it is
tight the rounded pose is globally optimal and the KKT system can be
differentiated to get the sensitivity of the pose to every weight matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr

from .lie import PoseSE3, hat, project_to_so3, se3_exp, vee
from .likelihood import EPS, pair_arrays, residual_jacobian, weights_from_cov
from .sdp import SdpError, independent_constraints, solve_ipm

DIM = 13
N_CONSTRAINTS = 25
H_IDX = 0
R_IDX = slice(1, 10)
T_IDX = slice(10, 13)
RANK1_THRESHOLD = 1e-6
GAP_THRESHOLD = 1e-6
QR_PIVOT_TOL = 1e-9


class RegistrationError(RuntimeError):
    """Registration could not certify or compute a solution."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NonTightRelaxation(RegistrationError):
    """The relaxation was not tight; ``candidate`` is the rounded pose."""

    def __init__(self, message, candidate, diagnostics):
        super().__init__(message, diagnostics)
        self.candidate = candidate


class DegenerateCorrespondences(RegistrationError, ValueError):
    pass


class RankDeficientKKT(RegistrationError):
    pass


def lift(T):
    """Homogeneous 13-vector of a pose, ``h = 1``."""
    return np.concatenate([[1.0], T.rotation.reshape(-1, order="F"), T.translation])


def unlift(x):
    """Pose encoded by ``x`` after scaling to ``h = 1`` (no projection)."""
    x = np.asarray(x, dtype=float) / x[H_IDX]
    return x[R_IDX].reshape(3, 3, order="F"), x[T_IDX].copy()


def residual_operator(p, q):
    """``D`` with ``D @ x = h q - R p - t`` for every pair: shape ``(N, 3, 13)``."""
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    n = len(p)
    D = np.zeros((n, 3, DIM))
    D[:, :, H_IDX] = q
    eye = np.eye(3)
    for j in range(3):
        # R p = sum_j p_j * column_j
        D[:, :, 1 + 3 * j : 4 + 3 * j] = -p[:, j, None, None] * eye
    D[:, :, T_IDX] = -eye
    return D


def _check_weights(W):
    W = np.asarray(W, dtype=float).reshape(-1, 3, 3)
    if not np.allclose(W, np.swapaxes(W, 1, 2), rtol=1e-12, atol=1e-12 * max(1.0, np.abs(W).max(initial=0))):
        raise ValueError("weight matrices must be symmetric")
    return W


def build_cost(corr, clouds, weights):
    """``Q = sum D_i^T W_i D_i`` so that ``x^T Q x = sum d_i^T W_i d_i``."""
    p, q = pair_arrays(corr, clouds)
    W = _check_weights(weights)
    if len(W) != len(p):
        raise ValueError(f"{len(W)} weights for {len(p)} correspondences")
    D = residual_operator(p, q)
    Q = np.einsum("nai,nab,nbj->ij", D, W, D, optimize=True)
    return 0.5 * (Q + Q.T)


def _bilinear(a, b, coef=1.0):
    """Symmetric matrix of the form ``coef * x[a] * x[b]``."""
    A = np.zeros((DIM, DIM))
    A[a, b] += 0.5 * coef
    A[b, a] += 0.5 * coef
    return A


def _col(j, c):
    return 1 + 3 * j + c


def build_constraints():
    """The 25 constraint matrices; index 0 is the normalizer ``h^2 = 1``.

    Order after the normalizer: 6 column orthonormality, 9 row/column
    balancing, 9 right-handedness.
    """
    A = [_bilinear(H_IDX, H_IDX)]
    for i in range(3):
        for j in range(i, 3):
            M = sum(_bilinear(_col(i, c), _col(j, c)) for c in range(3))
            if i == j:
                M = M - _bilinear(H_IDX, H_IDX)
            A.append(M)
    for i in range(3):
        for j in range(3):
            col_sq = sum(_bilinear(_col(j, r), _col(j, r)) for r in range(3))
            row_sq = sum(_bilinear(_col(c, i), _col(c, i)) for c in range(3))
            A.append(col_sq - row_sq)
    for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        for c in range(3):
            c1, c2 = (c + 1) % 3, (c + 2) % 3
            M = _bilinear(_col(j, c1), _col(k, c2)) - _bilinear(_col(j, c2), _col(k, c1))
            A.append(M - _bilinear(H_IDX, _col(i, c)))
    return np.array(A)


_CONSTRAINTS = build_constraints()
_CONSTRAINTS.flags.writeable = False
_INDEPENDENT = independent_constraints(_CONSTRAINTS)


@dataclass
class SdpSolution:
    X: np.ndarray
    duals: np.ndarray
    primal_value: float
    dual_value: float
    gap: float
    tight: bool
    rank1_ratio: float
    Q: np.ndarray
    iterations: int = 0
    ipm_primal_value: float = np.nan
    ipm_dual_value: float = np.nan
    refined: bool = False
    pose: PoseSE3 | None = None
    certificate: "Certificate | None" = None


@dataclass
class Certificate:
    H_bar: np.ndarray
    G_r: np.ndarray
    rows: np.ndarray
    x_hat: np.ndarray
    duals: np.ndarray


@dataclass
class GradientBundle:
    """Sensitivities of the optimum to each symmetric weight entry.

    ``dx[i, a, b]`` is ``d x_hat / d W_i[a, b]`` for a symmetric perturbation
    (``W_ab`` and ``W_ba`` move together by half each), ``dxi`` the same in
    right-perturbation twist coordinates.
    """

    dx: np.ndarray
    dxi: np.ndarray


@dataclass
class RegistrationResult:
    pose: PoseSE3
    solution: SdpSolution
    certificate: Certificate
    diagnostics: dict
    grad: GradientBundle | None = None
    _kkt: tuple | None = field(default=None, repr=False)

    def vjp_weights(self, g_twist):
        """Gradient of a scalar loss w.r.t. each ``W_i`` given ``dL/dxi``."""
        return _weights_vjp(self._kkt, g_twist)


def _rank1_ratio(X):
    ev = np.linalg.eigvalsh(0.5 * (X + X.T))
    top = ev[-1]
    if top <= 0:
        return np.inf
    return float(max(ev[-2], 0.0) / top)


def solve_sdp(Q, A=None, tol=1e-12, max_iter=100, refine=True):
    """Solve the relaxation of ``min x^T Q x`` under the lifted constraints.

    The cost is normalized to unit Frobenius norm internally; the
    returned values refer to the original ``Q``.  Linearly dependent
    constraints are dropped for the solver and receive zero multipliers.
    Multipliers are reported with the sign of ``Q + sum lambda_l A_l``.

    Interior-point iterates are only accurate to roughly ``1e-9 ||Q||``.  When
    the relaxation is tight and ``refine`` is set, the rounded pose is
    Newton-refined on the lifted cost and the multipliers re-fit; if the
    resulting certificate matrix is PSD, the pair ``(x x^T, lambda)`` is an
    exactly complementary optimum and its values replace the raw ones (kept
    as ``ipm_primal_value`` / ``ipm_dual_value``).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = _CONSTRAINTS if A is None else np.asarray(A, dtype=float)
    keep = _INDEPENDENT if A is _CONSTRAINTS else independent_constraints(A)
    b = np.zeros(len(A))
    b[0] = 1.0
    Q = 0.5 * (np.asarray(Q, dtype=float) + np.asarray(Q, dtype=float).T)
    qn = float(np.linalg.norm(Q))
    scale = qn if qn > 0 else 1.0
    res = solve_ipm(Q / scale, A[keep], b[keep], tol=tol, max_iter=max_iter)
    duals = np.zeros(len(A))
    duals[keep] = -res.y * scale
    X = res.X
    primal = float(np.sum(Q * X))
    dual = float(res.dual_value * scale)
    sol = SdpSolution(
        X=X,
        duals=duals,
        primal_value=primal,
        dual_value=dual,
        gap=primal - dual,
        tight=False,
        rank1_ratio=_rank1_ratio(X),
        Q=Q,
        iterations=res.iterations,
        ipm_primal_value=primal,
        ipm_dual_value=dual,
    )
    try:
        T0, sol.tight = extract_pose(sol)
    except RegistrationError:
        # no pose can be read off X; the relaxation is certainly not tight
        return sol
    sol.pose = T0
    if refine and sol.tight and A is _CONSTRAINTS:
        T = refine_lifted(Q, T0)
        cert = certificate(sol, T)
        lo = np.linalg.eigvalsh(cert.H_bar)[0]
        if lo >= -1e-9 * scale:
            x = cert.x_hat
            value = float(x @ Q @ x)
            sol.pose = T
            sol.certificate = cert
            sol.duals = cert.duals
            sol.primal_value = value
            sol.dual_value = float(-cert.duals[0])
            sol.gap = sol.primal_value - sol.dual_value
            sol.refined = True
    return sol


def _lift_derivatives(T):
    """First and second derivatives of ``lift(T @ exp(xi))`` at ``xi = 0``."""
    R = T.rotation
    J = np.zeros((DIM, 6))
    H2 = np.zeros((DIM, 6, 6))
    gens = [hat(e) for e in np.eye(3)]
    for k in range(3):
        J[R_IDX, k] = (R @ gens[k]).reshape(-1, order="F")
        J[T_IDX, 3 + k] = R[:, k]
        for l in range(3):
            sym = 0.5 * (gens[k] @ gens[l] + gens[l] @ gens[k])
            H2[R_IDX, k, l] = (R @ sym).reshape(-1, order="F")
            cross = 0.5 * R @ (gens[k] @ np.eye(3)[l])
            H2[T_IDX, k, 3 + l] = cross
            H2[T_IDX, 3 + l, k] = cross
    return J, H2


def refine_lifted(Q, T, max_iter=30):
    """Newton iterations on ``lift(T)^T Q lift(T)`` over SE(3)."""

    def f(T):
        x = lift(T)
        return float(x @ Q @ x)

    cost = f(T)
    for _ in range(max_iter):
        x = lift(T)
        J, H2 = _lift_derivatives(T)
        Qx = Q @ x
        g = 2.0 * J.T @ Qx
        H = 2.0 * J.T @ Q @ J + 2.0 * np.einsum("i,ijk->jk", Qx, H2)
        H = 0.5 * (H + H.T)
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            H = 2.0 * J.T @ Q @ J
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        T_new = T @ se3_exp(step)
        new_cost = f(T_new)
        if new_cost > cost + 1e-13 * (abs(cost) + np.linalg.norm(Q)):
            break
        T, cost = T_new, new_cost
        if np.linalg.norm(step) < 1e-15:
            break
    return T


def extract_pose(sol):
    """Round the relaxation's solution to a pose and test tightness."""
    w, V = np.linalg.eigh(0.5 * (sol.X + sol.X.T))
    if w[-1] <= 0:
        raise RegistrationError("leading eigenvalue of X is not positive")
    v = V[:, -1]
    if abs(v[H_IDX]) < 1e-12:
        raise RegistrationError("leading eigenvector has no homogeneous component")
    R, t = unlift(v)
    T = PoseSE3(project_to_so3(R), t)
    x = lift(T)
    rounded = float(x @ sol.Q @ x)
    tight = bool(
        sol.rank1_ratio < RANK1_THRESHOLD
        and rounded - sol.primal_value < GAP_THRESHOLD * (1.0 + abs(sol.primal_value))
    )
    return T, tight


def weighted_cost(T, p, q, W):
    d = q - T.apply(p)
    return float(np.einsum("ni,nij,nj->", d, W, d, optimize=True))


def cost_derivatives(T, p, q, W):
    """Gradient and exact Hessian of ``sum d^T W d`` in the right twist at ``T``."""
    d = q - T.apply(p)
    J = residual_jacobian(p, T)
    Wd = np.einsum("nab,nb->na", W, d)
    g = 2.0 * np.einsum("nai,na->i", J, Wd)
    H = 2.0 * np.einsum("nai,nab,nbj->ij", J, W, J, optimize=True)
    # second-order part of the residual: -R (0.5 [rho]x^2 p + 0.5 rho x nu)
    e = Wd @ T.rotation  # rows are R^T W d
    ep = np.einsum("ni,nj->ij", e, p)
    K = np.zeros((6, 6))
    K[:3, :3] = -0.5 * (0.5 * (ep + ep.T) - np.trace(ep) * np.eye(3))
    K[:3, 3:] = 0.25 * hat(e.sum(axis=0))
    K[3:, :3] = K[:3, 3:].T
    H = H + 4.0 * K
    return g, 0.5 * (H + H.T)


def polish_pose(T, p, q, W, max_iter=30):
    """Newton refinement of a near-optimal pose on the exact weighted cost."""
    cost = weighted_cost(T, p, q, W)
    for _ in range(max_iter):
        g, H = cost_derivatives(T, p, q, W)
        try:
            np.linalg.cholesky(H)
        except np.linalg.LinAlgError:
            J = residual_jacobian(p, T)
            H = 2.0 * np.einsum("nai,nab,nbj->ij", J, W, J, optimize=True)
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        T_new = T @ se3_exp(step)
        new_cost = weighted_cost(T_new, p, q, W)
        if new_cost > cost * (1.0 + 1e-13) + 1e-300:
            break
        T, cost = T_new, new_cost
        if np.linalg.norm(step) < 1e-15:
            break
    return T


def constraint_jacobian(x, A=None):
    """Rows ``x^T A_l`` (half the gradient of each constraint)."""
    A = _CONSTRAINTS if A is None else A
    return np.einsum("i,lij->lj", x, A)


def reduce_rows(G, tol=QR_PIVOT_TOL):
    """Indices of a full-row-rank subset of ``G`` via column-pivoted QR."""
    _, R, piv = qr(G.T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * d[0])) if d.size and d[0] > 0 else 0
    return np.sort(piv[:rank])


def certificate(sol, T):
    """Certificate at the lifted pose, with multipliers refined for stationarity."""
    x = lift(T)
    G = constraint_jacobian(x)
    H_bar = sol.Q + np.tensordot(sol.duals, _CONSTRAINTS, axes=1)
    # least-squares correction keeps the multipliers close to the solver's
    # while driving H_bar x to zero at the refined pose
    dl, *_ = np.linalg.lstsq(G.T, -H_bar @ x, rcond=None)
    duals = sol.duals + dl
    H_bar = sol.Q + np.tensordot(duals, _CONSTRAINTS, axes=1)
    H_bar = 0.5 * (H_bar + H_bar.T)
    rows = reduce_rows(G)
    return Certificate(H_bar, G[rows], rows, x, duals)


def _kkt_matrix(cert):
    """Balanced reduced KKT matrix ``[[H_bar / s, G_r^T], [G_r, 0]]`` and ``s``.

    The true matrix is ``2 diag(s, 1) K diag(1, 1/s)``; balancing keeps the
    rank test meaningful when ``H_bar`` is many orders larger than ``G_r``.
    """
    k = len(cert.rows)
    s = max(np.linalg.norm(cert.H_bar, 2), 1e-300)
    K = np.zeros((DIM + k, DIM + k))
    K[:DIM, :DIM] = cert.H_bar / s
    K[:DIM, DIM:] = cert.G_r.T
    K[DIM:, :DIM] = cert.G_r
    if np.linalg.matrix_rank(K) < DIM + k:
        raise RankDeficientKKT("reduced KKT matrix is rank deficient")
    return K, s


def twist_map(T):
    """Linear map from ``dx`` to right-perturbation twist ``(d rho, d nu)``."""
    R = T.rotation
    Pi = np.zeros((6, DIM))
    for k in range(9):
        e = np.zeros(9)
        e[k] = 1.0
        dR = e.reshape(3, 3, order="F")
        S = R.T @ dR
        Pi[:3, 1 + k] = vee(0.5 * (S - S.T))
    Pi[3:, T_IDX] = R.T
    return Pi


def implicit_grad(sol, cert, corr, clouds, weight_params=None):
    """``d x_hat / d W_i[a, b]`` for every pair and symmetric entry.

    Solves ``M_r [dx; dlam_r] = -N`` with ``M_r = 2 [[H_bar, G_r^T], [G_r, 0]]``
    and ``N = [2 (dQ/dW_ab) x_hat; 0]`` by least squares.
    """
    p, q = pair_arrays(corr, clouds)
    K, s = _kkt_matrix(cert)
    D = residual_operator(p, q)
    x = cert.x_hat
    Dx = D @ x  # residuals at the optimum, (N, 3)
    n = len(p)
    # dQ/dW_ab x = 0.5 (D_a^T (D_b x) + D_b^T (D_a x))
    rhs = 0.5 * (
        np.einsum("nai,nb->niab", D, Dx) + np.einsum("nbi,na->niab", D, Dx)
    )  # (N, 13, 3, 3)
    # M z = -N with M = 2 diag(s, 1) K diag(1, 1/s) and N = [2 rhs; 0]
    N = np.zeros((DIM + len(cert.rows), n * 9))
    N[:DIM] = np.moveaxis(rhs, 1, 0).reshape(DIM, n * 9) / s
    sol_z, *_ = np.linalg.lstsq(K, -N, rcond=None)
    dx = sol_z[:DIM].T.reshape(n, 3, 3, DIM)
    T = PoseSE3(*unlift(x))
    dxi = dx @ twist_map(T).T
    return GradientBundle(dx, dxi)


def _weights_vjp(kkt, g_twist):
    (K, s), D, x, Pi = kkt
    g_x = Pi.T @ np.asarray(g_twist, dtype=float)
    rhs = np.zeros(K.shape[0])
    rhs[:DIM] = g_x
    # adjoint of M = 2 diag(s, 1) K diag(1, 1/s)
    v, *_ = np.linalg.lstsq(K.T, rhs, rcond=None)
    vx = v[:DIM] / (2.0 * s)
    u = D @ vx
    d = D @ x
    # dL = -2 u^T dW d for symmetric dW
    return -(u[:, :, None] * d[:, None, :] + d[:, :, None] * u[:, None, :])


def _check_spread(p):
    if len(p) < 3:
        raise DegenerateCorrespondences(f"need at least 3 correspondences, got {len(p)}")
    s = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[1] < 1e-9 * s[0]:
        raise DegenerateCorrespondences("source points are collinear")


def register(corr, clouds, C_list, want_grad=False, eps=EPS, tol=1e-12, weights=None, adjoint=False):
    """Certified weighted registration with ``W_i = (2 C_i + 2 eps I)^-1``.

    ``weights`` overrides the covariance-derived weights when given.
    ``want_grad`` attaches the full :class:`GradientBundle`; ``adjoint``
    only prepares the KKT system so :meth:`RegistrationResult.vjp_weights`
    can be used (cheaper when a single loss gradient is needed).
    """
    p, q = pair_arrays(corr, clouds)
    _check_spread(p)
    if weights is None:
        W = weights_from_cov(np.asarray(C_list, dtype=float).reshape(-1, 3, 3), eps)
    else:
        W = _check_weights(weights)
    if len(W) != len(p):
        raise ValueError(f"{len(W)} weights for {len(p)} correspondences")
    D = residual_operator(p, q)
    Q = np.einsum("nai,nab,nbj->ij", D, W, D, optimize=True)
    Q = 0.5 * (Q + Q.T)
    try:
        sol = solve_sdp(Q, tol=tol)
    except SdpError as exc:
        raise RegistrationError(f"SDP solve failed: {exc}", {"stage": "sdp"}) from exc
    # tightness is judged once, against the raw solver values; sol.pose is
    # the refined rounding when the certificate check passed
    T0, tight = sol.pose, sol.tight
    if T0 is None:
        raise NonTightRelaxation("no pose can be rounded from the relaxation", None,
                                 {"tight": False, "rank1_ratio": sol.rank1_ratio})
    x0 = lift(T0)
    rounded = float(x0 @ Q @ x0)
    diagnostics = {
        "primal_value": sol.primal_value,
        "dual_value": sol.dual_value,
        "ipm_primal_value": sol.ipm_primal_value,
        "ipm_dual_value": sol.ipm_dual_value,
        "gap": sol.gap,
        "rounding_gap": rounded - sol.ipm_primal_value,
        "rank1_ratio": sol.rank1_ratio,
        "tight": tight,
        "certified": sol.refined,
        "iterations": sol.iterations,
    }
    if not tight:
        raise NonTightRelaxation("relaxation is not tight", T0, diagnostics)
    if not sol.refined:
        raise NonTightRelaxation("certificate matrix is not PSD", T0, diagnostics)
    T = polish_pose(sol.pose, p, q, W)
    cert = certificate(sol, T)
    qn = max(np.linalg.norm(Q), 1e-300)
    diagnostics["stationarity"] = float(np.linalg.norm(cert.H_bar @ cert.x_hat) / qn)
    diagnostics["cost"] = weighted_cost(T, p, q, W)
    result = RegistrationResult(T, sol, cert, diagnostics)
    if want_grad or adjoint:
        result._kkt = (_kkt_matrix(cert), D, cert.x_hat, twist_map(T))
    if want_grad:
        result.grad = implicit_grad(sol, cert, corr, clouds)
    return result


def dump_debug(path, sol, A=None):
    """Write ``Q``, the constraint matrices, ``X`` and the multipliers as JSON."""
    A = _CONSTRAINTS if A is None else A
    doc = {
        "Q": sol.Q.tolist(),
        "A": [Ai.tolist() for Ai in A],
        "X": sol.X.tolist(),
        "lambda": sol.duals.tolist(),
        "primal_value": sol.primal_value,
        "dual_value": sol.dual_value,
        "tight": sol.tight,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
