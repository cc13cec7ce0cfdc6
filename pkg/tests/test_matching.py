import numpy as np
import pytest

from surfcov.lie import PoseSE3, rotation_error, se3_exp, so3_exp
from surfcov.matching import (
    DegenerateCloud,
    MatchResult,
    Trajectory,
    gicp_align,
    gicp_cost_terms,
    icp_point2plane,
    icp_point2point,
    kabsch,
    load_trajectory,
    odometry,
    rpe,
    save_trajectory,
    success_rate,
    voxel_downsample,
)
from surfcov.scenes import corridor_sequence, planar_scene_spec, synth_scene


def blob(rng, n=200):
    return rng.normal(size=(n, 3)) * [1.0, 0.7, 0.4]


def test_kabsch_recovers_pose(rng):
    P = blob(rng)
    T = se3_exp(rng.normal(size=6) * 0.5)
    E = kabsch(P, T.apply(P))
    np.testing.assert_allclose(E.matrix(), T.matrix(), atol=1e-12)


def test_icp_identity_converges_in_one_iteration(rng):
    P = blob(rng)
    res = icp_point2point(P, P)
    assert res.iterations == 1 and res.converged
    np.testing.assert_allclose(res.pose.matrix(), np.eye(4), atol=1e-12)
    assert res.final_cost < 1e-20


def test_icp_recovers_small_motion(rng):
    P = blob(rng, 300)
    T = se3_exp([0.05, -0.03, 0.04, 0.05, 0.02, -0.03])
    res = icp_point2point(P, T.apply(P))
    assert np.linalg.norm(res.pose.matrix() - T.matrix()) < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_cost_traces_are_monotone(seed):
    rng = np.random.default_rng(seed)
    P = blob(rng, 150)
    T = se3_exp(rng.normal(size=6) * 0.15)
    Q = T.apply(P) + 0.01 * rng.normal(size=P.shape)
    C = np.tile(np.diag([0.01, 0.02, 0.005]), (150, 1, 1))
    for res in (icp_point2point(P, Q, max_distance=1.0),
                gicp_align(P, Q, C, C, max_distance=1.0)):
        tr = np.array(res.cost_trace)
        assert np.all(np.diff(tr) <= 1e-12 * (1 + tr[:-1]))


def test_degenerate_clouds_rejected(rng):
    flat = np.c_[rng.normal(size=(20, 2)), np.zeros(20)]
    with pytest.raises(DegenerateCloud):
        icp_point2point(flat, blob(rng))
    with pytest.raises(DegenerateCloud):
        icp_point2point(blob(rng), np.ones((5, 3)))


def test_point2plane_recovers_pose_on_three_planes():
    sc = synth_scene(planar_scene_spec(0.0, source_samples=1, max_angle_deg=5, max_translation=0.1), 0)
    # noiseless: the target is the source mapped exactly
    Q = sc.T_star.apply(sc.P)
    res = icp_point2plane(sc.P, Q, sc.normals[sc.p_component])
    assert np.degrees(rotation_error(res.pose.rotation, sc.T_star.rotation)) < 1e-6
    assert np.linalg.norm(res.pose.translation - sc.T_star.translation) < 1e-6


def test_point2plane_rejects_bad_normals(rng):
    P = blob(rng)
    with pytest.raises(ValueError):
        icp_point2plane(P, P, np.ones_like(P))


def test_gicp_with_half_identity_follows_icp(rng):
    P = blob(rng, 120)
    T = se3_exp([0.1, 0.05, -0.08, 0.1, -0.05, 0.02])
    Q = T.apply(P) + 0.02 * rng.normal(size=P.shape)
    C = np.tile(0.5 * np.eye(3), (120, 1, 1))
    a = icp_point2point(P, Q, max_iter=8, tol=0.0)
    b = gicp_align(P, Q, C, C, max_iter=8, tol=0.0)
    for Ta, Tb in zip(a.pose_trace, b.pose_trace):
        np.testing.assert_allclose(Tb.matrix(), Ta.matrix(), atol=1e-10)


def test_gicp_gradient_and_hessian_against_fd(rng):
    n = 30
    p = rng.normal(size=(n, 3))
    q = rng.normal(size=(n, 3))
    A = rng.normal(size=(n, 3, 3))
    Cp = A @ np.swapaxes(A, 1, 2) * 0.1 + 0.01 * np.eye(3)
    Cq = Cp[::-1].copy()
    T = se3_exp(rng.normal(size=6) * 0.3)
    _, g, H = gicp_cost_terms(T, p, q, Cp, Cq)

    # with the fused covariance frozen at T, the gradient is exact and H is the GN Hessian
    from surfcov.matching import fused_covariances

    Minv = np.linalg.inv(fused_covariances(Cp, Cq, T.rotation))

    def f(xi):
        d = q - (T @ se3_exp(xi)).apply(p)
        return np.einsum("na,nab,nb->", d, Minv, d)

    h = 1e-6
    fd = np.array([(f(h * e) - f(-h * e)) / (2 * h) for e in np.eye(6)])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-6)
    # zero-residual instance: the GN Hessian is the true Hessian
    q0 = T.apply(p)

    def f0(xi):
        d = q0 - (T @ se3_exp(xi)).apply(p)
        return np.einsum("na,nab,nb->", d, Minv, d)

    _, _, H0 = gicp_cost_terms(T, p, q0, Cp, Cq)
    h = 1e-4
    I = np.eye(6)
    fdH = np.array([[(f0(h * (I[i] + I[j])) - f0(h * (I[i] - I[j])) - f0(h * (I[j] - I[i])) + f0(-h * (I[i] + I[j])))
                     / (4 * h * h) for j in range(6)] for i in range(6)])
    np.testing.assert_allclose(H0, fdH, rtol=1e-5, atol=1e-5)


def test_gicp_beats_point2point_on_planar_scene():
    sc = synth_scene(planar_scene_spec(0.0, source_samples=1, max_angle_deg=15, max_translation=0.3), 2)
    Cq = sc.q_covariances
    Cp = sc.p_covariances
    g = gicp_align(sc.P, sc.Q, Cp, Cq, max_distance=1.0)
    i = icp_point2point(sc.P, sc.Q, max_distance=1.0)
    eg = rotation_error(g.pose.rotation, sc.T_star.rotation)
    ei = rotation_error(i.pose.rotation, sc.T_star.rotation)
    assert eg < ei


# ---------------------------------------------------------------- odometry and metrics


def test_odometry_of_identical_scans_is_identity(rng):
    P = blob(rng)
    traj = odometry([P, P, P], matcher="point2point")
    for T in traj.poses:
        np.testing.assert_allclose(T.matrix(), np.eye(4), atol=1e-12)


def test_corridor_odometry_with_true_covariances():
    seq = corridor_sequence(n_scans=6, rng_seed=0)
    covs = [seq.scan_covariances(k) for k in range(6)]
    g = odometry(seq.scans, covs, "gicp", max_distance=1.0)
    p = odometry(seq.scans, None, "point2point", max_distance=1.0)
    ref = Trajectory(np.arange(6.0), [seq.poses[0].inverse() @ T for T in seq.poses])
    for k in range(1, 6):
        A = g.poses[k - 1].inverse() @ g.poses[k]
        B = ref.poses[k - 1].inverse() @ ref.poses[k]
        assert np.degrees(rotation_error(A.rotation, B.rotation)) < 0.5
    assert rpe(g, ref, 1)[0] < rpe(p, ref, 1)[0]


def test_odometry_argument_checks(rng):
    P = blob(rng)
    with pytest.raises(ValueError):
        odometry([P])
    with pytest.raises(ValueError):
        odometry([P, P], matcher="gicp")
    with pytest.raises(ValueError):
        odometry([P, P], matcher="ndt")


def traj(poses):
    return Trajectory(np.arange(len(poses), dtype=float), poses)


def test_rpe_identity_and_hand_case():
    I = PoseSE3.identity()
    assert rpe(traj([I] * 4), traj([I] * 4), 1) == (0.0, 0.0)
    shifted = PoseSE3(np.eye(3), [1.0, 0.0, 0.0])
    t, r = rpe(traj([I, shifted, shifted]), traj([I, I, I]), 1)
    # relative errors of norm 1 and 0
    assert t == pytest.approx(np.sqrt(0.5), abs=1e-15)
    assert r == 0.0
    with pytest.raises(ValueError):
        rpe(traj([I, I]), traj([I, I]), 2)


def test_rpe_constant_offset_and_global_transform(rng):
    ref = [se3_exp(rng.normal(size=6)) for _ in range(8)]
    G = se3_exp(rng.normal(size=6))
    est = [G @ T for T in ref]
    t, r = rpe(traj(est), traj(ref), 3)
    assert t < 1e-12 and r < 1e-7
    noisy = [T @ se3_exp(0.01 * rng.normal(size=6)) for T in ref]
    a = rpe(traj(noisy), traj(ref), 2)
    b = rpe(traj([G @ T for T in noisy]), traj(ref), 2)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_success_rate_hand_counted():
    angles = [0, 1, 2, 5, 9, 9.9, 10, 10.1, 11, 15, 20, 30, 45, 60, 90, 120, 179, 3, 4, 12]
    results = [MatchResult(PoseSE3(so3_exp([0, 0, np.deg2rad(a)]), np.zeros(3)), 1, 0.0, True) for a in angles]
    refs = [PoseSE3.identity()] * 20
    # nine within 10 degrees (the boundary counts): 0 1 2 5 9 9.9 10 3 4
    assert success_rate(results, refs) == 9 / 20
    assert success_rate([], []) == 0.0


def test_voxel_downsample():
    X = np.array([[0.01, 0.01, 0.01], [0.05, 0.05, 0.05], [0.5, 0.5, 0.5]])
    out = voxel_downsample(X, 0.2)
    np.testing.assert_allclose(out, [[0.03, 0.03, 0.03], [0.5, 0.5, 0.5]])
    assert voxel_downsample(np.zeros((0, 3))).shape == (0, 3)
    with pytest.raises(ValueError):
        voxel_downsample(X, 0.0)


def test_trajectory_file_round_trip(tmp_path, rng):
    t = Trajectory(np.array([0.0, 0.5, 1.25]), [se3_exp(rng.normal(size=6)) for _ in range(3)])
    path = tmp_path / "traj.txt"
    save_trajectory(path, t)
    line = path.read_text().splitlines()[1].split()
    assert len(line) == 13
    np.testing.assert_array_equal(np.array(line[4:], dtype=float).reshape(3, 3), t.poses[1].rotation)
    u = load_trajectory(path)
    np.testing.assert_array_equal(u.timestamps, t.timestamps)
    for a, b in zip(u.poses, t.poses):
        np.testing.assert_array_equal(a.matrix(), b.matrix())
