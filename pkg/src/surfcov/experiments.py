"""Reproducible experiment recipes shared by the CLI and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .estimators import (
    TrainConfig,
    normal_angle_error,
    normals_from_covariances,
    predict_direct,
    train,
)
from .geometry import CorrespondenceSet
from .lie import PoseSE3, random_pose
from .likelihood import energy
from .matching import Trajectory, odometry, rpe
from .scenes import corridor_sequence, planar_scene_spec, synth_scene

# Plain gradient descent in metres: the normal-direction factor entries are a
# few millimetres, so steps must stay well below that.
SCENE_LEARNING_RATE = 2.5e-7
SCENE_INIT_SCALE = 0.02
# network weights see the summed gradient of every point, so they need a far smaller step
SCENE_MLP_LEARNING_RATE = 1e-9


def scene_train_config(steps=300, use_pose_likelihood=True, rng_seed=0, backend="direct", **kw):
    """Training settings for synthetic scenes in metres (no coordinate scaling)."""
    kw.setdefault("learning_rate", SCENE_MLP_LEARNING_RATE if backend == "mlp" else SCENE_LEARNING_RATE)
    kw.setdefault("init_scale", SCENE_INIT_SCALE)
    kw.setdefault("coordinate_scale", 1.0)
    kw.setdefault("threshold", 1.0)
    kw.setdefault("neighborhood_radius", 1.0)
    return TrainConfig(epochs=steps, use_pose_likelihood=use_pose_likelihood, rng_seed=rng_seed, **kw)


def planar_scene(noise_sigma=0.0, rng_seed=0):
    return synth_scene(planar_scene_spec(noise_sigma=noise_sigma), rng_seed)


def mean_normal_error_deg(C, true_normals):
    n, _ = normals_from_covariances(C)
    return float(np.degrees(normal_angle_error(n, true_normals)).mean())


def train_scene(scene, config):
    """Direct training on a synthetic pair; returns report, covariances and normal error."""
    rep = train(scene.P, scene.Q, scene.T_tilde, None, "direct", config)
    C = predict_direct(rep.params) / config.coordinate_scale**2
    return rep, C, mean_normal_error_deg(C, scene.q_normals)


def nll_at_true_pose(scene, corr, C):
    """Correspondence negative log-likelihood at the true pose."""
    return energy(scene.T_star, corr, (scene.P, scene.Q), C[corr.target_idx], scene.T_star, None,
                  use_pose_likelihood=False).total


def registration_instance(rng, n=20, max_angle=np.deg2rad(60), max_translation=1.0, noise=0.0):
    """Random source points, their image under a random pose, identity pairing."""
    p = rng.uniform(-1.0, 1.0, size=(n, 3))
    T = random_pose(rng, max_angle, max_translation)
    q = T.apply(p) + noise * rng.standard_normal((n, 3))
    C = np.tile(np.eye(3) * 0.01, (n, 1, 1))
    return p, q, T, C, CorrespondenceSet.identity(n)


# ---------------------------------------------------------------- corridor


def submap_source(seq, k, reach=2):
    """Neighbouring scans mapped into scan ``k``'s frame with the reference poses."""
    n = len(seq.scans)
    nb = [j for j in range(k - reach, k + reach + 1) if 0 <= j < n and j != k]
    return np.vstack([(seq.poses[k].inverse() @ seq.poses[j]).apply(seq.scans[j]) for j in nb])


def learn_sequence_covariances(seq, config, reach=2):
    """Per-scan direct training against a local submap with an identity pose label."""
    covs = []
    for k, scan in enumerate(seq.scans):
        rep = train(submap_source(seq, k, reach), scan, PoseSE3.identity(), None, "direct", config)
        covs.append(predict_direct(rep.params) / config.coordinate_scale**2)
    return covs


def reference_trajectory(seq):
    T0 = seq.poses[0].inverse()
    return Trajectory(np.arange(len(seq.poses), dtype=float), [T0 @ T for T in seq.poses])


def corridor_benchmark(n_scans=20, rng_seed=0, delta=5, steps=60, learning_rate=5e-7):
    """Translation/rotation RPE of point-to-point ICP and of GICP with learned covariances."""
    seq = corridor_sequence(n_scans, rng_seed)
    cfg = scene_train_config(steps, use_pose_likelihood=False, learning_rate=learning_rate, threshold=0.5)
    covs = learn_sequence_covariances(seq, cfg)
    ref = reference_trajectory(seq)
    icp = rpe(odometry(seq.scans, matcher="point2point"), ref, delta)
    gicp = rpe(odometry(seq.scans, covs, matcher="gicp"), ref, delta)
    return {"icp": icp, "gicp": gicp, "covariances": covs, "sequence": seq}
