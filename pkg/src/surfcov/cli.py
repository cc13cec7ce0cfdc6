"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical failure
(diagnostics are printed to stderr as JSON).
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import sys

import numpy as np

from .augment import AugmentSpec, augment_scan
from .estimators import (
    NoCorrespondences,
    TrainingAborted,
    build_correspondences,
    load_checkpoint,
    normals_from_covariances,
    pca_covariance,
    predict_direct,
    save_checkpoint,
    train,
)
from .experiments import scene_train_config
from .geometry import cholesky_build
from .io import (
    FORMATS,
    DataFormatError,
    ExperimentConfig,
    guess_format,
    load_cloud,
    load_config,
    load_covariances,
    save_cloud,
    save_config,
    save_covariances,
    write_csv,
)
from .lie import PoseSE3, rotation_error
from .likelihood import NotPositiveDefinite
from .matching import (
    MatchError,
    OdometryError,
    Trajectory,
    load_trajectory,
    odometry,
    rpe,
    save_trajectory,
    success_rate,
)
from .network import init_params, mlp_forward
from .registration import RegistrationError, dump_debug, register
from .scenes import corridor_sequence, synth_scene
from .sdp import SdpError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def pose_to_dict(T):
    return {"rotation": T.rotation.tolist(), "translation": T.translation.tolist()}


def pose_from_dict(d):
    try:
        return PoseSE3(np.array(d["rotation"], dtype=float), np.array(d["translation"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad pose record: {exc}") from None


def load_pose(path, key=None):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON: {exc.msg}", exc.pos, path) from None
    if key and key in doc:
        doc = doc[key]
    return pose_from_dict(doc)


def write_json(path, doc):
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _cloud_format(path, requested):
    fmt = requested or guess_format(path)
    if fmt is None:
        raise UsageError(f"cannot infer the format of {path}; pass --format")
    return fmt


# ---------------------------------------------------------------- subcommands


def cmd_synth(args):
    cfg = _config(args)
    fmt = args.format
    ext = {"xyz_text": "xyz", "ply_ascii": "ply", "kitti_bin": "bin"}[fmt]
    if args.kind == "corridor":
        seq = corridor_sequence(args.scans, args.seed)
        for k, scan in enumerate(seq.scans):
            save_cloud(_out(args, f"scan_{k:03d}.{ext}"), scan, fmt)
            save_covariances(_out(args, f"scan_{k:03d}_gt.csv"), seq.scan_covariances(k),
                             seq.normals[seq.components[k]] @ seq.poses[k].rotation)
        T0 = seq.poses[0].inverse()
        save_trajectory(_out(args, "reference.txt"),
                        Trajectory(np.arange(len(seq.poses), dtype=float), [T0 @ T for T in seq.poses]))
        return
    spec = cfg.scene
    if args.noise is not None:
        spec = dataclasses.replace(spec, noise_sigma=args.noise)
    scene = synth_scene(spec, args.seed)
    save_cloud(_out(args, f"source.{ext}"), scene.P, fmt)
    save_cloud(_out(args, f"target.{ext}"), scene.Q, fmt)
    save_covariances(_out(args, "target_gt.csv"), scene.q_covariances, scene.q_normals)
    save_covariances(_out(args, "source_gt.csv"), scene.p_covariances,
                     scene.normals[scene.p_component] @ scene.T_star.rotation)
    write_json(_out(args, "poses.json"), {
        "T_star": pose_to_dict(scene.T_star),
        "T_tilde": pose_to_dict(scene.T_tilde),
        "noise_twist": scene.noise_twist.tolist(),
    })
    save_config(_out(args, "config.json"), dataclasses.replace(cfg, scene=spec))


def cmd_train(args):
    cfg = _config(args)
    backend = args.backend or cfg.backend
    if backend not in ("direct", "mlp"):
        raise UsageError("train supports the direct and mlp backends")
    tc = cfg.train
    if args.config is None and backend == "mlp":
        tc = scene_train_config(backend="mlp")
    tc = dataclasses.replace(tc, rng_seed=args.seed)
    if args.steps is not None:
        tc = dataclasses.replace(tc, epochs=args.steps)
    P = load_cloud(args.source, _cloud_format(args.source, args.format))
    Q = load_cloud(args.target, _cloud_format(args.target, args.format))
    T_tilde = load_pose(args.pose, "T_tilde") if args.pose else PoseSE3.identity()
    try:
        rep = train(P, Q, T_tilde, None, backend, tc)
    except TrainingAborted as exc:
        diag = {k: _jsonable(v) for k, v in exc.diagnostics.items()}
        diag["completed_steps"] = exc.report.steps if exc.report else 0
        raise NumericalFailure(str(exc), diag) from exc
    if rep.steps == 0 and backend == "mlp":
        params = init_params(tc.rng_seed, tc.init_scale)
    else:
        params = rep.params
    save_checkpoint(_out(args, "checkpoint.json"), backend, params, tc)
    rows = [
        (k, rep.loss[k], rep.corr_loss[k], rep.pose_loss[k], rep.logdet_loss[k])
        for k in range(rep.steps)
    ]
    write_csv(_out(args, "loss.csv"), ["step", "loss", "corr_loss", "pose_loss", "half_logdet_h"], rows)


def cmd_estimate(args):
    cfg = _config(args)
    X = load_cloud(args.cloud, _cloud_format(args.cloud, args.format)).points
    if args.checkpoint:
        backend, params, tc = load_checkpoint(args.checkpoint)
        s2 = tc.coordinate_scale**2
        if backend == "direct":
            if len(params) != len(X):
                raise DataFormatError(f"checkpoint holds {len(params)} points, cloud has {len(X)}")
            C = predict_direct(params) / s2
        else:
            C = cholesky_build(mlp_forward(X * tc.coordinate_scale, params, tc.neighborhood_radius)) / s2
    else:
        k = args.k or cfg.pca_k
        C = pca_covariance(X, k)
    normals = normals_from_covariances(C)[0] if args.normals else None
    save_covariances(_out(args, "covariances.csv"), C, normals)


def cmd_register(args):
    P = load_cloud(args.source, _cloud_format(args.source, args.format)).points
    Q = load_cloud(args.target, _cloud_format(args.target, args.format)).points
    C_q, _ = load_covariances(args.covariances)
    if len(C_q) != len(Q):
        raise DataFormatError(f"{len(C_q)} covariances for {len(Q)} target points")
    init = load_pose(args.init, "T_tilde") if args.init else PoseSE3.identity()
    corr = build_correspondences(P, Q, init, args.threshold)
    try:
        res = register(corr, (P, Q), C_q[corr.target_idx])
    except RegistrationError as exc:
        if isinstance(exc, ValueError):
            raise DataFormatError(str(exc)) from exc
        raise NumericalFailure(str(exc), {k: _jsonable(v) for k, v in exc.diagnostics.items()}) from exc
    diag = {k: _jsonable(v) for k, v in res.diagnostics.items()}
    diag["correspondences"] = len(corr)
    if args.reference:
        ref = load_pose(args.reference, "T_star")
        diag["rotation_error"] = rotation_error(res.pose.rotation, ref.rotation)
        diag["translation_error"] = float(np.linalg.norm(res.pose.translation - ref.translation))
    write_json(_out(args, "pose.json"), pose_to_dict(res.pose))
    write_json(_out(args, "diagnostics.json"), diag)
    if args.debug_sdp:
        dump_debug(_out(args, "sdp_debug.json"), res.solution)


def _scan_files(directory):
    files = []
    for ext in ("xyz", "ply", "bin"):
        files += glob.glob(os.path.join(directory, f"*.{ext}"))
    return sorted(files)


def cmd_odometry(args):
    cfg = _config(args)
    files = _scan_files(args.scans)
    if len(files) < 2:
        raise DataFormatError(f"need at least two scans in {args.scans}")
    scans = [load_cloud(f).points for f in files]
    matcher = args.matcher or cfg.matcher
    covs = normals = None
    if matcher in ("gicp", "point2plane"):
        covs = []
        for f, X in zip(files, scans):
            stem = os.path.splitext(f)[0]
            cov_file = None
            if args.covariances:
                cov_file = os.path.join(args.covariances, os.path.basename(stem) + args.cov_suffix)
            if cov_file and os.path.exists(cov_file):
                C, _ = load_covariances(cov_file)
            else:
                C = pca_covariance(X, cfg.pca_k)
            if len(C) != len(X):
                raise DataFormatError(f"covariance count mismatch for {f}")
            covs.append(C)
        normals = [normals_from_covariances(C)[0] for C in covs]
    try:
        traj = odometry(scans, covs, matcher, normals=normals, max_distance=args.max_distance)
    except OdometryError as exc:
        raise NumericalFailure(str(exc), {"completed_poses": len(exc.partial)}) from exc
    save_trajectory(_out(args, "trajectory.txt"), traj)
    if args.reference:
        ref = load_trajectory(args.reference)
        delta = args.delta or cfg.rpe_delta
        t, r = rpe(traj, ref, delta)
        write_csv(_out(args, "rpe.csv"), ["delta", "trans_rmse", "rot_rmse"], [(delta, t, r)])


def cmd_augment(args):
    cfg = _config(args)
    X = load_cloud(args.cloud, _cloud_format(args.cloud, args.format)).points
    C, _ = load_covariances(args.covariances)
    if len(C) != len(X):
        raise DataFormatError(f"{len(C)} covariances for {len(X)} points")
    spec = cfg.augment
    spec = AugmentSpec(
        args.samples if args.samples is not None else spec.samples_per_point,
        args.sigma_scale if args.sigma_scale is not None else spec.sigma_scale,
        not args.no_original and spec.include_original,
        args.seed,
    )
    out = augment_scan(X, C, spec)
    fmt = args.out_format or _cloud_format(args.cloud, args.format)
    ext = {"xyz_text": "xyz", "ply_ascii": "ply", "kitti_bin": "bin"}[fmt]
    save_cloud(_out(args, f"augmented.{ext}"), out, fmt)


def cmd_eval(args):
    cfg = _config(args)
    rows = []
    if args.estimated and args.reference:
        est, ref = load_trajectory(args.estimated), load_trajectory(args.reference)
        delta = args.delta or cfg.rpe_delta
        t, r = rpe(est, ref, delta)
        rows += [("rpe_trans_rmse", t), ("rpe_rot_rmse", r), ("rpe_delta", float(delta))]
    if args.pose_pairs:
        with open(args.pose_pairs) as fh:
            try:
                pairs = json.load(fh)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"invalid JSON: {exc.msg}", exc.pos, args.pose_pairs) from None
        est = [pose_from_dict(p["estimate"]) for p in pairs]
        ref = [pose_from_dict(p["reference"]) for p in pairs]
        rows.append(("success_rate", success_rate(est, ref, args.threshold_deg)))
    if not rows:
        raise UsageError("eval needs --estimated/--reference trajectories or --pose-pairs")
    write_csv(_out(args, "metrics.csv"), ["metric", "value"], rows)


# ---------------------------------------------------------------- parser


def build_parser():
    parser = _Parser(prog="surfcov", description="Learned per-point covariances for scan registration.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="experiment config JSON")
        p.add_argument("--out-dir", default=".", help="output directory")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene with ground truth")
    p.add_argument("--kind", choices=("pair", "corridor"), default="pair")
    p.add_argument("--noise", type=float, default=None, help="translation noise of the recorded pose")
    p.add_argument("--scans", type=int, default=20, help="corridor length in scans")
    p.add_argument("--format", choices=FORMATS, default="xyz_text")

    p = add("train", cmd_train, "learn covariances of the target scan")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--pose", default=None, help="JSON with the recorded pose (T_tilde)")
    p.add_argument("--backend", choices=("direct", "mlp"), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--format", choices=FORMATS, default=None)

    p = add("estimate", cmd_estimate, "per-point covariances for a cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--checkpoint", default=None, help="trained checkpoint; PCA when omitted")
    p.add_argument("--k", type=int, default=None, help="PCA neighbourhood size")
    p.add_argument("--normals", action="store_true")
    p.add_argument("--format", choices=FORMATS, default=None)

    p = add("register", cmd_register, "certified registration of two clouds")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--covariances", required=True, help="target covariance CSV")
    p.add_argument("--init", default=None, help="JSON pose used to build correspondences")
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--reference", default=None, help="JSON with the true pose (T_star)")
    p.add_argument("--debug-sdp", action="store_true")
    p.add_argument("--format", choices=FORMATS, default=None)

    p = add("odometry", cmd_odometry, "scan-to-scan odometry over a directory of scans")
    p.add_argument("--scans", required=True, help="directory of scans, processed in name order")
    p.add_argument("--covariances", default=None, help="directory of per-scan covariance CSVs")
    p.add_argument("--cov-suffix", default=".csv")
    p.add_argument("--matcher", choices=("point2point", "point2plane", "gicp"), default=None)
    p.add_argument("--reference", default=None, help="reference trajectory file")
    p.add_argument("--delta", type=int, default=None)
    p.add_argument("--max-distance", type=float, default=np.inf)

    p = add("augment", cmd_augment, "densify a cloud by sampling its covariances")
    p.add_argument("--cloud", required=True)
    p.add_argument("--covariances", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--sigma-scale", type=float, default=None)
    p.add_argument("--no-original", action="store_true")
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--out-format", choices=FORMATS, default=None)

    p = add("eval", cmd_eval, "trajectory and pose metrics")
    p.add_argument("--estimated", default=None)
    p.add_argument("--reference", default=None)
    p.add_argument("--delta", type=int, default=None)
    p.add_argument("--pose-pairs", default=None, help="JSON list of {estimate, reference} poses")
    p.add_argument("--threshold-deg", type=float, default=10.0)
    return parser


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(json.dumps({"error": str(exc), "diagnostics": exc.diagnostics}, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    except (RegistrationError, SdpError, NotPositiveDefinite, TrainingAborted, np.linalg.LinAlgError) as exc:
        diag = {k: _jsonable(v) for k, v in getattr(exc, "diagnostics", {}).items()}
        print(json.dumps({"error": str(exc), "diagnostics": diag}, sort_keys=True), file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataFormatError, NoCorrespondences, MatchError, ValueError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
