"""Small dense primal-dual interior-point solver for a single PSD block.

Solves ``min <C, X>  s.t.  <A_i, X> = b_i,  X >= 0`` and its dual
``max b^T y  s.t.  S = C - sum y_i A_i >= 0`` using the HKM search direction
with Mehrotra predictor-corrector steps.  Only meant for tiny problems (a few
dozen constraints, a block of order ~10), so every step is a dense solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular


class SdpError(RuntimeError):
    """Base class for solver failures; ``best`` holds the last iterate, if any."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SdpMaxIterations(SdpError):
    pass


class SdpInfeasible(SdpError):
    pass


@dataclass
class IpmResult:
    X: np.ndarray
    y: np.ndarray
    S: np.ndarray
    primal_value: float
    dual_value: float
    iterations: int
    primal_infeasibility: float
    dual_infeasibility: float
    history: list = field(default_factory=list)


def independent_constraints(A, tol=1e-9):
    """Indices of a linearly independent subset of the constraint matrices.

    Column-pivoted QR of the stacked vectorized matrices; pivots below
    ``tol`` times the largest are treated as dependent.
    """
    V = np.stack([np.asarray(Ai).reshape(-1) for Ai in A], axis=1)
    _, R, piv = qr(V, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0.0:
        return np.array([], dtype=int)
    rank = int(np.sum(d > tol * d[0]))
    return np.sort(piv[:rank])


def _sym(M):
    return 0.5 * (M + M.T)


def _max_step(M, dM):
    """Largest ``alpha`` in ``(0, inf]`` keeping ``M + alpha dM`` PSD."""
    w, V = np.linalg.eigh(M)
    K = V / np.sqrt(np.clip(w, 1e-300, None))
    ev = np.linalg.eigvalsh(_sym(K.T @ dM @ K))
    lo = ev[0]
    return np.inf if lo >= 0 else -1.0 / lo


def solve_ipm(C, A, b, tol=1e-9, max_iter=100, step_fraction=0.98, stall_tol=1e-8):
    """Solve the standard-form SDP; ``A`` must be linearly independent.

    Stops when the relative gap and both relative infeasibilities are below
    ``tol``.  Close to the optimum round-off can make further steps worse; once
    the best merit is below ``stall_tol`` and three steps fail to improve it,
    the best iterate seen is returned.
    """
    C = _sym(np.asarray(C, dtype=float))
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n, m = C.shape[0], len(A)
    Avec = A.reshape(m, -1)
    gram = np.linalg.cholesky(Avec @ Avec.T)

    def op(X):
        return Avec @ X.reshape(-1)

    def adj(y):
        return np.tensordot(y, A, axes=1)

    scale = max(1.0, np.linalg.norm(C), np.linalg.norm(b))
    X = np.eye(n) * scale
    S = np.eye(n) * scale
    y = np.zeros(m)
    history = []
    best = None
    best_merit = np.inf
    stalled = 0
    for it in range(max_iter + 1):
        rp = b - op(X)
        Rd = C - adj(y) - S
        gap = float(np.sum(X * S))
        pobj = float(np.sum(C * X))
        dobj = float(b @ y)
        p_inf = np.linalg.norm(rp) / (1.0 + np.linalg.norm(b))
        d_inf = np.linalg.norm(Rd) / (1.0 + np.linalg.norm(C))
        rel_gap = gap / (1.0 + abs(pobj) + abs(dobj))
        history.append((pobj, dobj, rel_gap, p_inf, d_inf))
        merit = max(rel_gap, p_inf, d_inf)
        if merit < best_merit:
            best = IpmResult(X, y, S, pobj, dobj, it, p_inf, d_inf, history)
            best_merit = merit
            stalled = 0
        else:
            stalled += 1
        if merit < tol:
            return best
        if best_merit < stall_tol and stalled >= 4:
            return best
        if it == max_iter:
            break
        if np.linalg.norm(X) > 1e12 or np.linalg.norm(S) > 1e12:
            raise SdpInfeasible("iterates diverged; constraint system looks infeasible", best)

        try:
            wx, Vx = np.linalg.eigh(X)
            ws, Vs = np.linalg.eigh(S)
            if wx[0] <= 0 or ws[0] <= 0:
                raise np.linalg.LinAlgError("iterate left the PSD cone")
            Lx = Vx * np.sqrt(wx)
            Ks = Vs / np.sqrt(ws)
            Sinv = Ks @ Ks.T
            # M_ij = tr(A_i X A_j S^-1) = <K^T A_i L, K^T A_j L>, so M = B B^T
            B = np.einsum("ji,mjk,kl->mil", Ks, A, Lx).reshape(m, -1)
            _, Rb = np.linalg.qr(B.T)
            if np.min(np.abs(np.diag(Rb))) <= 1e-14 * np.max(np.abs(np.diag(Rb))):
                raise np.linalg.LinAlgError("Schur complement is singular")
        except np.linalg.LinAlgError as exc:
            if best_merit < stall_tol:
                return best
            raise SdpInfeasible("Schur complement became singular", best) from exc

        XRdS = X @ Rd @ Sinv
        mu = gap / n

        def direction(Rc):
            rhs = rp - op(Rc) + op(_sym(XRdS))
            dy = solve_triangular(Rb, solve_triangular(Rb, rhs, trans="T"))
            dS = Rd - adj(dy)
            dX = _sym(Rc - X @ dS @ Sinv)
            # round-off in X dS S^-1 grows as S nears singularity; project the
            # step back onto the primal equality constraints
            miss = rp - op(dX)
            dX = dX + adj(solve_triangular(gram, solve_triangular(gram, miss, lower=True), lower=True, trans="T"))
            return dX, dy, _sym(dS)

        # predictor (affine scaling)
        dX, dy, dS = direction(-X)
        ap = min(1.0, step_fraction * _max_step(X, dX))
        ad = min(1.0, step_fraction * _max_step(S, dS))
        gap_aff = float(np.sum((X + ap * dX) * (S + ad * dS)))
        sigma = min(1.0, (gap_aff / gap) ** 3) if gap > 0 else 0.0

        # corrector
        Rc = sigma * mu * Sinv - X - _sym(dX @ dS @ Sinv)
        dX, dy, dS = direction(Rc)
        ap = min(1.0, step_fraction * _max_step(X, dX))
        ad = min(1.0, step_fraction * _max_step(S, dS))
        X = _sym(X + ap * dX)
        y = y + ad * dy
        S = _sym(S + ad * dS)

    raise SdpMaxIterations(f"no convergence in {max_iter} iterations", best)
