import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from surfcov.geometry import CorrespondenceSet
from surfcov.lie import PoseSE3, random_pose, rotation_error, se3_exp
from surfcov.likelihood import weights_from_cov
from surfcov.registration import (
    DegenerateCorrespondences,
    build_constraints,
    build_cost,
    dump_debug,
    extract_pose,
    lift,
    register,
    solve_sdp,
)
from surfcov.sdp import independent_constraints, solve_ipm

A = build_constraints()


def random_weights(rng, n):
    B = rng.normal(size=(n, 3, 3))
    return B @ np.swapaxes(B, 1, 2) + 0.1 * np.eye(3)


def noisy_instance(rng, n=20, noise=0.02, angle=np.deg2rad(60)):
    T = random_pose(rng, angle, 1.0)
    p = rng.uniform(-1, 1, size=(n, 3))
    q = T.apply(p) + noise * rng.normal(size=(n, 3))
    return p, q, T


def kabsch_oracle(p, q):
    mp, mq = p.mean(0), q.mean(0)
    U, _, Vt = np.linalg.svd((p - mp).T @ (q - mq))
    S = np.diag([1, 1, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ S @ U.T
    return R, mq - R @ mp


# ---------------------------------------------------------------- cost and constraints


def test_cost_translation_only_case(rng):
    corr = CorrespondenceSet.identity(1)
    Q = build_cost(corr, (np.zeros((1, 3)), np.zeros((1, 3))), [np.eye(3)])
    for _ in range(5):
        T = random_pose(rng)
        x = lift(T)
        assert x @ Q @ x == pytest.approx(T.translation @ T.translation, rel=1e-12)


def test_cost_single_pair_matches_residual(rng):
    p, q = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    Q = build_cost(CorrespondenceSet.identity(1), (p, q), [np.eye(3)])
    for _ in range(5):
        T = random_pose(rng)
        x = lift(T)
        d = q[0] - T.apply(p[0])
        assert x @ Q @ x == pytest.approx(d @ d, rel=1e-12, abs=1e-12)


def test_lifted_objective_consistency():
    rng = np.random.default_rng(4)
    p, q = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    W = random_weights(rng, 30)
    Q = build_cost(CorrespondenceSet.identity(30), (p, q), W)
    for _ in range(100):
        T = random_pose(rng)
        x = lift(T)
        d = q - T.apply(p)
        ref = np.einsum("ni,nij,nj->", d, W, d)
        assert abs(x @ Q @ x - ref) < 1e-10 * max(1.0, ref)


def test_cost_rejects_asymmetric_weights():
    W = np.eye(3)
    W[0, 1] = 1.0
    with pytest.raises(ValueError):
        build_cost(CorrespondenceSet.identity(1), (np.zeros((1, 3)),) * 2, [W])


def test_constraints_count_and_identity():
    assert A.shape == (25, 13, 13)
    for Ai in A:
        np.testing.assert_array_equal(Ai, Ai.T)
    x = lift(PoseSE3.identity())
    vals = np.einsum("i,lij,j->l", x, A, x)
    assert vals[0] == 1.0
    np.testing.assert_array_equal(vals[1:], 0.0)


def test_constraints_sign_symmetry(rng):
    x = -lift(random_pose(rng))
    vals = np.einsum("i,lij,j->l", x, A, x)
    assert vals[0] == pytest.approx(1.0)
    assert np.abs(vals[1:]).max() < 1e-12


def test_constraints_feasible_for_random_poses():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        x = lift(random_pose(rng, np.pi, 5.0))
        vals = np.einsum("i,lij,j->l", x, A, x)
        worst = max(worst, abs(vals[0] - 1), np.abs(vals[1:]).max())
    assert worst < 1e-12


def test_constraints_have_redundancy():
    # the 24 rotation constraints are linearly dependent as matrices
    assert len(independent_constraints(A)) < 25


# ---------------------------------------------------------------- SDP


def test_ipm_on_textbook_problem():
    # min tr(C X) s.t. X11 = 1, X22 = 1 with C = [[1, 1], [1, 1]] -> optimum 0 at X = [[1,-1],[-1,1]]
    C = np.array([[1.0, 1.0], [1.0, 1.0]])
    A1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    A2 = np.array([[0.0, 0.0], [0.0, 1.0]])
    res = solve_ipm(C, np.array([A1, A2]), np.array([1.0, 1.0]), tol=1e-10)
    assert res.primal_value == pytest.approx(0.0, abs=1e-8)
    np.testing.assert_allclose(res.X, [[1, -1], [-1, 1]], atol=1e-6)


def test_sdp_normalizer_objective():
    sol = solve_sdp(A[0])
    assert sol.primal_value == pytest.approx(1.0, abs=1e-8)
    assert not sol.tight


def test_sdp_noiseless_is_zero_and_tight(rng):
    p, _, T = noisy_instance(rng, noise=0.0)
    q = T.apply(p)
    Q = build_cost(CorrespondenceSet.identity(20), (p, q), np.tile(np.eye(3), (20, 1, 1)))
    sol = solve_sdp(Q)
    assert abs(sol.primal_value) < 1e-8
    assert sol.tight


def test_sdp_dual_feasible_and_small_gap(rng):
    p, q, _ = noisy_instance(rng)
    Q = build_cost(CorrespondenceSet.identity(20), (p, q), random_weights(rng, 20))
    sol = solve_sdp(Q, refine=False)
    H = Q + np.tensordot(sol.duals, A, axes=1)
    tol = 1e-9 * np.linalg.norm(Q)
    assert np.linalg.eigvalsh(H)[0] >= -tol
    assert np.linalg.eigvalsh(sol.X)[0] >= -1e-9
    assert sol.gap >= -1e-7
    assert sol.gap < 1e-7 * (1 + abs(sol.primal_value))


def test_sdp_rejects_bad_tol():
    with pytest.raises(ValueError):
        solve_sdp(np.eye(13), tol=0.0)


def test_extract_pose_from_rank_one():
    rng = np.random.default_rng(6)
    T = random_pose(rng)
    p = rng.normal(size=(10, 3))
    Q = build_cost(CorrespondenceSet.identity(10), (p, T.apply(p)), np.tile(np.eye(3), (10, 1, 1)))
    sol = solve_sdp(Q, refine=False)
    x = lift(T)
    sol.X = np.outer(x, x)
    sol.primal_value = float(x @ Q @ x)
    sol.rank1_ratio = 0.0
    T2, tight = extract_pose(sol)
    assert tight
    np.testing.assert_allclose(T2.matrix(), T.matrix(), atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_isotropic_registration_matches_procrustes(seed):
    rng = np.random.default_rng(seed)
    p, q, _ = noisy_instance(rng, 15, 0.05)
    res = register(CorrespondenceSet.identity(15), (p, q), np.tile(0.5 * np.eye(3), (15, 1, 1)))
    R, t = kabsch_oracle(p, q)
    np.testing.assert_allclose(res.pose.rotation, R, atol=1e-8)
    np.testing.assert_allclose(res.pose.translation, t, atol=1e-8)


def test_relaxation_lower_bounds_local_optimum(rng):
    from scipy.optimize import minimize

    p, q, T = noisy_instance(rng, 12, 0.1)
    W = random_weights(rng, 12)
    Q = build_cost(CorrespondenceSet.identity(12), (p, q), W)
    sol = solve_sdp(Q)

    def f(xi):
        x = lift(T @ se3_exp(xi))
        return x @ Q @ x

    best = minimize(f, np.zeros(6), method="BFGS", options={"gtol": 1e-12}).fun
    # the solver's dual value is a certified lower bound; the refined primal is exact
    assert sol.ipm_dual_value <= best
    assert sol.primal_value <= best + 1e-12 * (1 + abs(best))


# ---------------------------------------------------------------- register


def test_self_registration_is_identity(rng):
    p = rng.normal(size=(10, 3))
    res = register(CorrespondenceSet.identity(10), (p, p), np.tile(0.01 * np.eye(3), (10, 1, 1)))
    np.testing.assert_allclose(res.pose.matrix(), np.eye(4), atol=1e-10)


def test_two_plane_anisotropic_recovery():
    rng = np.random.default_rng(8)
    n = 50
    u = rng.uniform(-1, 1, size=(n, 2))
    p = np.zeros((n, 3))
    p[:25, :2] = u[:25]  # z = 0 plane
    p[25:, 0], p[25:, 2] = u[25:, 0], u[25:, 1] + 1.0  # y = 0 plane
    C = np.zeros((n, 3, 3))
    C[:25] = np.diag([0.01, 0.01, 1e-6])
    C[25:] = np.diag([0.01, 1e-6, 0.01])
    axis = rng.normal(size=3)
    T = PoseSE3(se3_exp(np.r_[np.deg2rad(30) * axis / np.linalg.norm(axis), 0, 0, 0]).rotation, [0.3, -0.2, 0.5])
    q = T.apply(p)
    Cq = T.rotation @ C @ T.rotation.T
    res = register(CorrespondenceSet.identity(n), (p, q), Cq)
    assert rotation_error(res.pose.rotation, T.rotation) < 1e-5
    assert np.linalg.norm(res.pose.translation - T.translation) < 1e-6


def test_collinear_points_rejected():
    p = np.outer(np.linspace(0, 1, 5), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateCorrespondences):
        register(CorrespondenceSet.identity(5), (p, p), np.tile(np.eye(3), (5, 1, 1)))


def test_certificate_stationarity(rng):
    p, q, _ = noisy_instance(rng)
    W = random_weights(rng, 20)
    res = register(CorrespondenceSet.identity(20), (p, q), None, weights=W)
    cert = res.certificate
    Q = res.solution.Q
    assert np.linalg.norm(cert.H_bar @ cert.x_hat) < 1e-6 * np.linalg.norm(Q)


# ---------------------------------------------------------------- implicit gradients


def solve_pose(p, q, W):
    return register(CorrespondenceSet.identity(len(p)), (p, q), None, weights=W).pose


def test_gradient_zero_on_noiseless_instance(rng):
    p, _, T = noisy_instance(rng, 10, 0.0)
    q = T.apply(p)
    W = random_weights(rng, 10)
    res = register(CorrespondenceSet.identity(10), (p, q), None, weights=W, want_grad=True)
    assert np.abs(res.grad.dx).max() < 1e-8


def test_gradient_matches_fd_through_solver():
    rng = np.random.default_rng(9)
    p, q, _ = noisy_instance(rng, 10, 0.05)
    W = random_weights(rng, 10)
    res = register(CorrespondenceSet.identity(10), (p, q), None, weights=W, want_grad=True)
    T0 = res.pose
    h = 1e-6
    worst = 0.0
    for i in range(10):
        for a, b in [(0, 0), (0, 1), (1, 2), (2, 2)]:
            E = np.zeros((3, 3))
            E[a, b] += 0.5
            E[b, a] += 0.5
            Wp, Wm = W.copy(), W.copy()
            Wp[i] += h * E
            Wm[i] -= h * E
            fd = (lift(solve_pose(p, q, Wp)) - lift(solve_pose(p, q, Wm))) / (2 * h)
            an = res.grad.dx[i, a, b]
            worst = max(worst, np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12))
    assert worst < 1e-4
    assert T0.is_valid()


def test_uniform_weight_scaling_does_not_move_pose(rng):
    p, q, _ = noisy_instance(rng, 10, 0.05)
    W = np.tile(np.eye(3), (10, 1, 1))
    res = register(CorrespondenceSet.identity(10), (p, q), None, weights=W, want_grad=True)
    # d/dc of W_i = c I for all i: sum of diagonal sensitivities
    d_dc = sum(res.grad.dxi[i, a, a] for i in range(10) for a in range(3))
    assert np.abs(d_dc).max() < 1e-8


def test_vjp_matches_full_bundle(rng):
    p, q, _ = noisy_instance(rng, 10, 0.05)
    W = random_weights(rng, 10)
    res = register(CorrespondenceSet.identity(10), (p, q), None, weights=W, want_grad=True)
    g = rng.normal(size=6)
    G = res.vjp_weights(g)
    # the bundle stores derivatives for symmetric perturbations of (a, b)
    for i in range(3):
        for a in range(3):
            for b in range(3):
                E = np.zeros((3, 3))
                E[a, b] += 0.5
                E[b, a] += 0.5
                assert np.sum(G[i] * E) == pytest.approx(g @ res.grad.dxi[i, a, b], rel=1e-6, abs=1e-10)


def test_register_with_covariances_uses_regularized_weights(rng):
    p, q, _ = noisy_instance(rng, 10, 0.05)
    C = random_weights(rng, 10) * 0.01
    a = register(CorrespondenceSet.identity(10), (p, q), C).pose
    b = register(CorrespondenceSet.identity(10), (p, q), None, weights=weights_from_cov(C)).pose
    assert a == b


def test_debug_dump(tmp_path, rng):
    p, q, _ = noisy_instance(rng, 10, 0.05)
    res = register(CorrespondenceSet.identity(10), (p, q), np.tile(np.eye(3), (10, 1, 1)))
    dump_debug(tmp_path / "sdp.json", res.solution)
    doc = json.loads((tmp_path / "sdp.json").read_text())
    assert set(doc) >= {"Q", "A", "X", "lambda"}
    assert np.array(doc["A"]).shape == (25, 13, 13)
    np.testing.assert_array_equal(np.array(doc["Q"]), res.solution.Q)
