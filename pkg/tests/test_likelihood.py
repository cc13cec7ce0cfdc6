import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from surfcov.geometry import CorrespondenceSet, cholesky_build
from surfcov.lie import PoseSE3, perturb, random_pose, se3_exp
from surfcov.likelihood import (
    EPS,
    NotPositiveDefinite,
    correspondence_grad_cov,
    correspondence_nll,
    default_gamma,
    energy,
    fd_energy_hessian,
    gn_hessian,
    inv3,
    laplace_loss,
    pose_nll,
    pose_nll_grad_twist,
    residual_jacobian,
    weights_from_cov,
)

LOG2PI = np.log(2 * np.pi)


def random_spd(rng, n=None, scale=1.0):
    A = rng.normal(size=(3, 3) if n is None else (n, 3, 3))
    return scale * (A @ np.swapaxes(A, -1, -2) + 0.1 * np.eye(3))


def instance(rng, n=50, noise=0.05):
    T = random_pose(rng, 1.0, 1.0)
    p = rng.uniform(-1, 1, size=(n, 3))
    q = T.apply(p) + noise * rng.normal(size=(n, 3))
    C = random_spd(rng, n, 0.01)
    return p, q, T, C, CorrespondenceSet.identity(n)


def test_correspondence_nll_examples():
    assert correspondence_nll(np.zeros(3), 0.5 * np.eye(3), eps=0.0) == 0.0
    assert correspondence_nll([1.0, 0, 0], 0.5 * np.eye(3), eps=0.0) == pytest.approx(0.5, abs=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_correspondence_nll_matches_gaussian_density(seed):
    rng = np.random.default_rng(seed)
    d, C = rng.normal(size=3), random_spd(rng)
    ref = -multivariate_normal(np.zeros(3), 2 * (C + EPS * np.eye(3))).logpdf(d) - 1.5 * LOG2PI
    assert correspondence_nll(d, C) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_singular_covariance_raises():
    with pytest.raises(NotPositiveDefinite):
        correspondence_nll(np.zeros(3), -np.eye(3))
    with pytest.raises(NotPositiveDefinite):
        weights_from_cov(np.zeros((3, 3)), eps=0.0)


def test_inv3_matches_numpy(rng):
    A = random_spd(rng, 20)
    np.testing.assert_allclose(inv3(A), np.linalg.inv(A), rtol=1e-10, atol=1e-12)


def test_pose_nll_examples():
    T = random_pose(np.random.default_rng(0))
    assert pose_nll(T, T, default_gamma()) == 0.0
    T_tilde = se3_exp([0, 0, 0, 1.0, 0, 0])
    assert pose_nll(PoseSE3.identity(), T_tilde, np.eye(6)) == pytest.approx(0.5)


def test_pose_nll_gradient_matches_fd(rng):
    G = random_spd(rng)
    Gamma = np.block([[G, np.zeros((3, 3))], [np.zeros((3, 3)), 2 * G]])
    xi = rng.normal(size=6)
    f = lambda x: 0.5 * x @ np.linalg.solve(Gamma, x)  # noqa: E731
    h = 1e-6
    fd = np.array([(f(xi + h * e) - f(xi - h * e)) / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(pose_nll_grad_twist(xi, Gamma), fd, rtol=1e-6, atol=1e-6)


def test_energy_trivial_cases():
    empty = CorrespondenceSet([], [])
    T = PoseSE3.identity()
    e = energy(T, empty, (np.zeros((0, 3)), np.zeros((0, 3))), np.zeros((0, 3, 3)), T, default_gamma())
    assert e.total == 0.0
    one = CorrespondenceSet.identity(1)
    e = energy(T, one, (np.zeros((1, 3)), np.zeros((1, 3))), [0.5 * np.eye(3)], T, default_gamma(), eps=0.0)
    assert e.total == 0.0
    assert e.pose_logdet == pytest.approx(0.5 * np.linalg.slogdet(default_gamma())[1])


def test_energy_is_sum_of_parts(rng):
    p, q, T, C, corr = instance(rng)
    T_tilde = T @ se3_exp(0.01 * rng.normal(size=6))
    Gamma = default_gamma()
    e = energy(T, corr, (p, q), C, T_tilde, Gamma)
    ref = sum(correspondence_nll(q[i] - T.apply(p[i]), C[i]) for i in range(len(p)))
    ref += pose_nll(T, T_tilde, Gamma)
    assert e.total == pytest.approx(ref, rel=1e-12)
    assert e.total == pytest.approx(e.corr_logdet + e.corr_quadratic + e.pose_quadratic, rel=1e-15)


def test_energy_additivity(rng):
    p, q, T, C, _ = instance(rng, 30)
    T_tilde = T @ se3_exp(0.01 * rng.normal(size=6))
    G = default_gamma()
    a = CorrespondenceSet(np.arange(12), np.arange(12))
    b = CorrespondenceSet(np.arange(12, 30), np.arange(12, 30))
    full = energy(T, CorrespondenceSet.identity(30), (p, q), C, T_tilde, G).total
    ea = energy(T, a, (p, q), C[:12], T_tilde, G).total
    eb = energy(T, b, (p, q), C[12:], T_tilde, G).total
    assert full == pytest.approx(ea + eb - pose_nll(T, T_tilde, G), rel=1e-12)


def test_jacobian_examples():
    R = random_pose(np.random.default_rng(1)).rotation
    J = residual_jacobian(np.zeros(3), PoseSE3(R, np.zeros(3)))
    np.testing.assert_array_equal(J[:, :3], np.zeros((3, 3)))
    np.testing.assert_array_equal(J[:, 3:], -R)
    # frozen from central differences of q - exp(xi) p at p = (0, 0, 1):
    # a small rotation about x moves p towards -y, so d moves towards +y
    J = residual_jacobian(np.array([0.0, 0.0, 1.0]), PoseSE3.identity())
    np.testing.assert_array_equal(J[:, :3], [[0, -1, 0], [1, 0, 0], [0, 0, 0]])


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(2)
    h = 1e-5
    worst = 0.0
    for _ in range(100):
        T = random_pose(rng)
        p, q = rng.normal(size=3), rng.normal(size=3)
        J = residual_jacobian(p, T)
        fd = np.stack(
            [((q - perturb(T, h * e).apply(p)) - (q - perturb(T, -h * e).apply(p))) / (2 * h) for e in np.eye(6)],
            axis=1,
        )
        worst = max(worst, np.abs(J - fd).max())
    assert worst < 1e-6


def test_batched_jacobian_matches_single(rng):
    T = random_pose(rng)
    p = rng.normal(size=(4, 3))
    Jb = residual_jacobian(p, T)
    for i in range(4):
        np.testing.assert_allclose(Jb[i], residual_jacobian(p[i], T), atol=1e-15)


def test_gn_hessian_examples():
    G = default_gamma()
    T = PoseSE3.identity()
    empty = CorrespondenceSet([], [])
    np.testing.assert_allclose(gn_hessian(T, empty, (np.zeros((0, 3)),) * 2, np.zeros((0, 3, 3)), G),
                               np.linalg.inv(G))
    one = CorrespondenceSet.identity(1)
    H = gn_hessian(T, one, (np.zeros((1, 3)),) * 2, [0.5 * np.eye(3)], None, eps=0.0)
    np.testing.assert_array_equal(H[3:, 3:], np.eye(3))
    np.testing.assert_array_equal(H[:3, :3], np.zeros((3, 3)))


def test_gn_hessian_symmetric_and_close_to_full_hessian(rng):
    p, q, T, C, corr = instance(rng, 40, noise=0.002)
    G = default_gamma()
    H = gn_hessian(T, corr, (p, q), C, G)
    np.testing.assert_array_equal(H, H.T)
    Hfd = fd_energy_hessian(T, corr, (p, q), C, T, G)
    assert np.linalg.norm(H - Hfd) / np.linalg.norm(Hfd) < 0.1


def test_laplace_loss_examples(rng):
    G = default_gamma()
    T = PoseSE3.identity()
    empty = CorrespondenceSet([], [])
    val = laplace_loss(T, empty, (np.zeros((0, 3)),) * 2, np.zeros((0, 3, 3)), T, G)
    assert val == pytest.approx(0.5 * np.linalg.slogdet(np.linalg.inv(G))[1])

    p, q, T, C, corr = instance(rng, 20)
    T_tilde = T @ se3_exp(0.01 * rng.normal(size=6))
    e = energy(T, corr, (p, q), C, T_tilde, G)
    H = gn_hessian(T, corr, (p, q), C, G)
    assert laplace_loss(T, corr, (p, q), C, T_tilde, G) == pytest.approx(
        e.total + 0.5 * np.linalg.slogdet(H)[1], rel=1e-12
    )


def test_laplace_loss_decreases_when_covariances_shrink(rng):
    p, _, T, C, corr = instance(rng, 20)
    q = T.apply(p)
    G = default_gamma()
    big = laplace_loss(T, corr, (p, q), C, T, G)
    small = laplace_loss(T, corr, (p, q), C / 10, T, G)
    assert small < big


def test_fixed_pose_loss_is_correspondence_mle(rng):
    p, q, T, C, corr = instance(rng, 20)
    T_tilde = T @ se3_exp(0.01 * rng.normal(size=6))
    val = laplace_loss(T, corr, (p, q), C, T_tilde, default_gamma(), use_pose_likelihood=False)
    corr_nll = sum(correspondence_nll(q[i] - T.apply(p[i]), C[i]) for i in range(20))
    H = gn_hessian(T, corr, (p, q), C, None)
    assert val == pytest.approx(corr_nll + 0.5 * np.linalg.slogdet(H)[1], rel=1e-12)


def test_quadratic_gradient_vanishes_at_zero_residual(rng):
    C = random_spd(rng, 5)
    G = correspondence_grad_cov(np.zeros((5, 3)), C)
    np.testing.assert_allclose(G, 0.5 * np.linalg.inv(C + EPS * np.eye(3)), rtol=1e-12)


def test_covariance_gradient_matches_fd(rng):
    C = random_spd(rng)
    d = rng.normal(size=3)
    G = correspondence_grad_cov(d[None], C[None])[0]
    h = 1e-6
    fd = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            E = np.zeros((3, 3))
            E[a, b] = h
            fd[a, b] = (correspondence_nll(d, C + E) - correspondence_nll(d, C - E)) / (2 * h)
    # the analytic gradient is the symmetric one
    np.testing.assert_allclose(G, 0.5 * (fd + fd.T), rtol=1e-6, atol=1e-8)


def test_factor_quadratic_gradient_zero_when_residuals_vanish(rng):
    L = rng.normal(size=6)
    d = np.zeros(3)
    h = 1e-6
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        quad = lambda LL: 0.5 * d @ np.linalg.solve(2 * cholesky_build(LL), d)  # noqa: E731
        assert (quad(L + e) - quad(L - e)) / (2 * h) == 0.0
