"""Covariance estimators and the self-supervised training loop.

Three backends produce per-point covariances for a target cloud:

* ``direct``: one free lower-triangular factor per point,
* ``mlp``: the neighborhood network of :mod:`surfcov.network`,
* PCA over the ``k`` nearest neighbours, as a non-learned baseline.

Training minimizes ``0.5 log|H(T_hat)| + energy(T_hat)`` where ``T_hat`` is
the certified registration under the current covariances.  Its gradient is
assembled from the closed-form partials of the energy, the implicit
gradient of the registration layer, and a finite-difference gradient of the
log-determinant term.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.sparse import csr_matrix
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .geometry import (
    CorrespondenceSet,
    PointCloud,
    check_points,
    cholesky_build,
    pack_tril,
    unpack_tril,
)
from .lie import PoseSE3, perturb
from .likelihood import (
    EPS,
    correspondence_grad_cov,
    default_gamma,
    energy,
    gn_hessian,
    hessian_logdet,
    pose_nll,
    residual_jacobian,
    weights_from_cov,
)
from .network import MlpParams, build_neighborhoods, init_params, mlp_backward, mlp_forward
from .registration import RegistrationError, register

FORMAT_VERSION = 1
PCA_K = 24


class NoCorrespondences(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """A training step failed; ``report`` holds the steps completed so far."""

    def __init__(self, message, report=None, diagnostics=None):
        super().__init__(message)
        self.report = report
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------- correspondences


def build_correspondences(P, Q, T_tilde, threshold):
    """Nearest target point for every source point mapped through ``T_tilde``.

    Pairs farther apart than ``threshold`` are dropped.  Exact distance ties
    go to the lowest target index.
    """
    if threshold <= 0 and threshold != 0:
        raise ValueError("threshold must be non-negative")
    Pp = P.points if isinstance(P, PointCloud) else check_points(P)
    Qp = Q.points if isinstance(Q, PointCloud) else check_points(Q)
    if len(Pp) == 0 or len(Qp) == 0:
        raise NoCorrespondences("empty cloud")
    X = T_tilde.apply(Pp)
    tree = cKDTree(Qp)
    dmin, _ = tree.query(X, k=1)
    src, tgt = [], []
    for i, (x, d0) in enumerate(zip(X, dmin)):
        if d0 > threshold * (1.0 + 1e-12) + 1e-300:
            continue
        cand = np.asarray(tree.query_ball_point(x, d0 * (1.0 + 1e-9) + 1e-300), dtype=int)
        cand.sort()
        d = np.linalg.norm(Qp[cand] - x, axis=1)
        j = int(cand[np.argmin(d)])
        if d.min() <= threshold:
            src.append(i)
            tgt.append(j)
    if not src:
        raise NoCorrespondences("no pair within the distance threshold")
    return CorrespondenceSet(np.array(src), np.array(tgt), len(Pp), len(Qp))


# ---------------------------------------------------------------- simple estimators


def pca_covariance(cloud, k=PCA_K):
    """Covariance of each point's neighbourhood: itself plus its ``k`` nearest.

    Centered at the neighbourhood mean, divided by ``k``.
    """
    X = cloud.points if isinstance(cloud, PointCloud) else check_points(cloud)
    if k < 1:
        raise ValueError("k must be positive")
    if len(X) <= k:
        raise ValueError(f"need more than k={k} points, got {len(X)}")
    _, idx = cKDTree(X).query(X, k=k + 1)
    nb = X[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    return np.einsum("nki,nkj->nij", centered, centered) / k


def predict_direct(params):
    return cholesky_build(np.asarray(params, dtype=float).reshape(-1, 6))


@dataclass(frozen=True)
class NormalEstimate:
    normal: np.ndarray
    degenerate: bool


def normal_from_covariance(C, rel_tol=1e-10):
    """Unit eigenvector of the smallest eigenvalue, largest-magnitude entry positive."""
    C = np.asarray(C, dtype=float)
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    n = V[:, 0]
    n = n / np.linalg.norm(n)
    if n[np.argmax(np.abs(n))] < 0:
        n = -n
    scale = max(abs(w[-1]), np.finfo(float).tiny)
    degenerate = bool(abs(w[1] - w[0]) <= rel_tol * scale)
    return NormalEstimate(n, degenerate)


def normals_from_covariances(C):
    C = np.asarray(C, dtype=float).reshape(-1, 3, 3)
    out = [normal_from_covariance(c) for c in C]
    return np.array([o.normal for o in out]), np.array([o.degenerate for o in out])


def normal_angle_error(normals, reference):
    """Unsigned angle (radians) between paired unit normals."""
    c = np.abs(np.einsum("ij,ij->i", normals, reference))
    return np.arccos(np.clip(c, -1.0, 1.0))


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 300
    # lengths below are in scaled coordinates (0.01 -> 1 m at the default scale)
    threshold: float = 0.01
    use_pose_likelihood: bool = True
    logdet_hessian_mode: str = "finite_difference"
    logdet_through_pose: bool = True
    rng_seed: int = 0
    coordinate_scale: float = 0.01
    init_scale: float = 0.001
    eps: float = EPS
    logdet_fd_step: float = 1e-6
    neighborhood_radius: float = 0.01
    sigma_rot: float = 0.01
    sigma_trans: float = 0.05

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.logdet_hessian_mode not in ("finite_difference", "off"):
            raise ValueError("logdet_hessian_mode must be 'finite_difference' or 'off'")
        if not self.coordinate_scale > 0:
            raise ValueError("coordinate_scale must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    loss: list = field(default_factory=list)
    corr_loss: list = field(default_factory=list)
    pose_loss: list = field(default_factory=list)
    logdet_loss: list = field(default_factory=list)
    step_time: list = field(default_factory=list)
    params: object = None
    backend: str = "direct"
    final_pose: PoseSE3 | None = None
    correspondences: CorrespondenceSet | None = None
    config: TrainConfig | None = None

    @property
    def steps(self):
        return len(self.loss)


@dataclass
class TrainingProblem:
    """Scaled clouds and fixed quantities shared by every training step."""

    P: np.ndarray
    Q: np.ndarray
    T_tilde: PoseSE3
    Gamma: np.ndarray
    corr: CorrespondenceSet
    config: TrainConfig


def scale_pose(T, s):
    return PoseSE3(T.rotation, T.translation * s)


def scale_gamma(Gamma, s):
    S = np.diag([1.0, 1.0, 1.0, s, s, s])
    return S @ Gamma @ S


def prepare_problem(P, Q, T_tilde, Gamma, config):
    s = config.coordinate_scale
    Pp = (P.points if isinstance(P, PointCloud) else check_points(P)) * s
    Qp = (Q.points if isinstance(Q, PointCloud) else check_points(Q)) * s
    Tt = scale_pose(T_tilde, s)
    G = scale_gamma(default_gamma(config.sigma_rot, config.sigma_trans) if Gamma is None else Gamma, s)
    corr = build_correspondences(Pp, Qp, Tt, config.threshold)
    return TrainingProblem(Pp, Qp, Tt, G, corr, config)


@dataclass
class StepResult:
    loss: float
    corr_loss: float
    pose_loss: float
    logdet_loss: float
    grad_L: np.ndarray | None
    pose: PoseSE3
    diagnostics: dict


def _twist_grad(f, h=1e-6):
    """Central-difference gradient of ``f(xi)`` at ``xi = 0``."""
    g = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        g[k] = (f(e) - f(-e)) / (2 * h)
    return g


def _logdet_grad_L(L, corr, J, W, H0, eps, rel_step):
    """Central differences of ``0.5 log|H|`` over every factor entry at fixed pose.

    Only the Hessian summands of pairs whose target is perturbed change, so
    each perturbed Hessian is a low-rank update of ``H0``.
    """
    nq = len(L)
    tgt = corr.target_idx
    Lm = unpack_tril(L)
    # step per target point, relative to the size of its factor
    h = rel_step * np.maximum(np.linalg.norm(L, axis=1), 1e-12)
    grad = np.zeros((nq, 6))
    Jt = np.swapaxes(J, 1, 2)
    # sums pair contributions into their target points
    scatter = csr_matrix((np.ones(len(tgt)), (tgt, np.arange(len(tgt)))), shape=(nq, len(tgt)))
    rows = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]
    for k, (a, b) in enumerate(rows):
        vals = []
        for sign in (1.0, -1.0):
            Lp = Lm.copy()
            Lp[:, a, b] += sign * h
            Cp = Lp @ np.swapaxes(Lp, 1, 2)
            Wp = weights_from_cov(Cp, eps)[tgt]
            dW = Wp - W
            dH = Jt @ dW @ J
            acc = (scatter @ dH.reshape(len(tgt), 36)).reshape(nq, 6, 6)
            sign_, logdet = np.linalg.slogdet(H0 + acc)
            if np.any(sign_ <= 0):
                raise np.linalg.LinAlgError("perturbed Hessian lost positive definiteness")
            vals.append(logdet)
        grad[:, k] = 0.5 * (vals[0] - vals[1]) / (2 * h)
    return grad


def evaluate_step(problem, L, want_grad=True):
    """Loss at the current factors and, optionally, its gradient w.r.t. ``L``."""
    cfg = problem.config
    eps = cfg.eps
    corr = problem.corr
    clouds = (problem.P, problem.Q)
    C = cholesky_build(L)
    Cc = C[corr.target_idx]
    diagnostics = {}
    use_pose = cfg.use_pose_likelihood
    if use_pose:
        res = register(corr, clouds, Cc, eps=eps, adjoint=want_grad)
        T_hat = res.pose
        diagnostics.update(res.diagnostics)
    else:
        # the fixed-pose model takes the recorded pose as exact
        res = None
        T_hat = problem.T_tilde
    e = energy(T_hat, corr, clouds, Cc, problem.T_tilde, problem.Gamma, eps, use_pose)
    H = gn_hessian(T_hat, corr, clouds, Cc, problem.Gamma, eps, include_prior=use_pose)
    half_logdet = 0.5 * hessian_logdet(H)
    loss = e.total + half_logdet
    corr_loss = e.corr_logdet + e.corr_quadratic
    if not want_grad:
        return StepResult(loss, corr_loss, e.pose_quadratic, half_logdet, None, T_hat, diagnostics)

    p, q = corr.gather(problem.P, problem.Q)
    D = q - T_hat.apply(p)
    G_Cc = correspondence_grad_cov(D, Cc, eps)
    W = weights_from_cov(Cc, eps)
    J = residual_jacobian(p, T_hat)
    if use_pose:
        # loss gradient in the right twist at T_hat, then through the layer
        g_xi = np.einsum("nai,nab,nb->i", J, W, D, optimize=True)
        g_xi = g_xi + _twist_grad(lambda xi: pose_nll(perturb(T_hat, xi), problem.T_tilde, problem.Gamma))
        if cfg.logdet_hessian_mode != "off" and cfg.logdet_through_pose:
            prior = np.linalg.inv(problem.Gamma)

            def half_logdet_at(xi):
                Jx = residual_jacobian(p, perturb(T_hat, xi))
                Hx = np.einsum("nai,nab,nbj->ij", Jx, W, Jx, optimize=True) + prior
                return 0.5 * hessian_logdet(0.5 * (Hx + Hx.T))

            g_xi = g_xi + _twist_grad(half_logdet_at)
        G_W = res.vjp_weights(g_xi)
        G_Cc = G_Cc - 2.0 * W @ G_W @ W
    G_C = np.zeros_like(C)
    np.add.at(G_C, corr.target_idx, G_Cc)
    G_C = 0.5 * (G_C + np.swapaxes(G_C, 1, 2))
    grad_L = pack_tril(2.0 * G_C @ unpack_tril(L))
    if cfg.logdet_hessian_mode != "off":
        grad_L = grad_L + _logdet_grad_L(L, corr, J, W, H, eps, cfg.logdet_fd_step)
    return StepResult(loss, corr_loss, e.pose_quadratic, half_logdet, grad_L, T_hat, diagnostics)


def train(P, Q, T_tilde, Gamma=None, backend="direct", config=None, init=None, callback=None):
    """Self-supervised covariance training by plain gradient descent.

    ``P`` is the source scan, ``Q`` the target whose per-point covariances
    are learned, ``T_tilde`` the recorded pose mapping ``P`` into ``Q``'s
    frame.  Returns a :class:`TrainReport`; the reported parameters live in
    the scaled coordinates given by ``config.coordinate_scale``.
    ``callback(step, params)`` is called after every update.
    """
    cfg = config or TrainConfig()
    if backend not in ("direct", "mlp"):
        raise ValueError(f"unknown backend {backend!r}")
    problem = prepare_problem(P, Q, T_tilde, Gamma, cfg)
    nq = len(problem.Q)
    s0 = cfg.init_scale
    if backend == "direct":
        theta = np.tile([s0, 0.0, s0, 0.0, 0.0, s0], (nq, 1)) if init is None else np.array(init, dtype=float)
        nb = None
    else:
        theta = init_params(cfg.rng_seed, s0) if init is None else init.copy()
        nb = build_neighborhoods(problem.Q, cfg.neighborhood_radius)
    report = TrainReport(backend=backend, correspondences=problem.corr, config=cfg)

    def factors(th):
        if backend == "direct":
            return th, None
        return mlp_forward(problem.Q, th, cfg.neighborhood_radius, nbhd=nb, return_cache=True)

    for step in range(cfg.epochs):
        t0 = time.perf_counter()
        L, cache = factors(theta)
        try:
            r = evaluate_step(problem, L, want_grad=True)
        except (RegistrationError, np.linalg.LinAlgError, ValueError) as exc:
            report.params = theta
            diag = getattr(exc, "diagnostics", {})
            raise TrainingAborted(f"step {step}: {exc}", report, diag) from exc
        if backend == "direct":
            theta = theta - cfg.learning_rate * r.grad_L
        else:
            g = mlp_backward(theta, cache, r.grad_L)
            theta = MlpParams(theta.flat - cfg.learning_rate * g)
        report.loss.append(r.loss)
        report.corr_loss.append(r.corr_loss)
        report.pose_loss.append(r.pose_loss)
        report.logdet_loss.append(r.logdet_loss)
        report.step_time.append(time.perf_counter() - t0)
        report.final_pose = r.pose
        if callback is not None:
            callback(step, theta)
    report.params = theta
    return report


def final_factors(report, Q):
    """Factors (scaled units) of the trained parameters for target cloud ``Q``."""
    cfg = report.config
    if report.backend == "direct":
        return np.asarray(report.params)
    Qs = (Q.points if isinstance(Q, PointCloud) else check_points(Q)) * cfg.coordinate_scale
    return mlp_forward(Qs, report.params, cfg.neighborhood_radius)


def unscale_covariances(C, coordinate_scale):
    return np.asarray(C) / coordinate_scale**2


# ---------------------------------------------------------------- checkpoints


def _arch(backend, n):
    if backend == "direct":
        return {"points": int(n), "factor_entries": 6}
    from .network import DECODER_DIMS, ENCODER_DIMS, MAX_NEIGHBORS

    return {
        "encoder": list(ENCODER_DIMS),
        "decoder": list(DECODER_DIMS),
        "max_neighbors": MAX_NEIGHBORS,
    }


def save_checkpoint(path, backend, params, config):
    flat = params.flat if isinstance(params, MlpParams) else np.asarray(params, dtype=float).reshape(-1)
    n = len(flat) // 6 if backend == "direct" else None
    doc = {
        "format_version": FORMAT_VERSION,
        "backend": backend,
        "architecture": _arch(backend, n),
        "config": config.to_dict() if isinstance(config, TrainConfig) else dict(config),
        # 17 significant digits round-trip any double exactly
        "parameters": [float(f"{v:.17g}") for v in flat],
    }
    text = json.dumps(doc, indent=1, sort_keys=True)
    with open(path, "w") as fh:
        fh.write(text)


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("format_version", "backend", "architecture", "config", "parameters"):
        if key not in doc:
            raise ValueError(f"checkpoint is missing '{key}'")
    if doc["format_version"] != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc['format_version']}")
    flat = np.array(doc["parameters"], dtype=float)
    backend = doc["backend"]
    if backend == "direct":
        params = flat.reshape(-1, 6)
    elif backend == "mlp":
        params = MlpParams(flat)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return backend, params, TrainConfig.from_dict(doc["config"])


# ---------------------------------------------------------------- sklearn-style wrappers


def _covs_to_upper(C):
    return C[:, [0, 0, 0, 1, 1, 2], [0, 1, 2, 1, 2, 2]]


class PCACovariance(TransformerMixin, BaseEstimator):
    """Neighbourhood PCA covariances; ``transform`` returns ``(N, 3, 3)``."""

    def __init__(self, k=PCA_K):
        self.k = k

    def fit(self, X, y=None):
        check_points(X)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return pca_covariance(check_points(X), self.k)


class DirectCovarianceEstimator(TransformerMixin, BaseEstimator):
    """Learns one covariance per target point from a source scan and pose.

    ``fit(Q, P=..., T_tilde=...)`` trains; ``transform(Q)`` returns the
    learned covariances (original units) for the fitted target.
    """

    def __init__(
        self,
        learning_rate=1e-4,
        epochs=300,
        threshold=0.01,
        use_pose_likelihood=True,
        logdet_hessian_mode="finite_difference",
        coordinate_scale=0.01,
        init_scale=0.001,
        rng_seed=0,
    ):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.threshold = threshold
        self.use_pose_likelihood = use_pose_likelihood
        self.logdet_hessian_mode = logdet_hessian_mode
        self.coordinate_scale = coordinate_scale
        self.init_scale = init_scale
        self.rng_seed = rng_seed

    def _config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            threshold=self.threshold,
            use_pose_likelihood=self.use_pose_likelihood,
            logdet_hessian_mode=self.logdet_hessian_mode,
            coordinate_scale=self.coordinate_scale,
            init_scale=self.init_scale,
            rng_seed=self.rng_seed,
        )

    def fit(self, X, y=None, P=None, T_tilde=None, Gamma=None):
        Q = check_points(X, allow_empty=False)
        if P is None or T_tilde is None:
            raise ValueError("fit needs the source scan P and the pose T_tilde")
        self.report_ = train(P, Q, T_tilde, Gamma, "direct", self._config())
        self.factors_ = np.asarray(self.report_.params)
        self.fit_points_ = Q.copy()
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "factors_")
        X = check_points(X)
        if X.shape != self.fit_points_.shape or not np.array_equal(X, self.fit_points_):
            raise ValueError("the direct backend only predicts for the cloud it was fitted on")
        return unscale_covariances(predict_direct(self.factors_), self.coordinate_scale)


class MLPCovarianceEstimator(TransformerMixin, BaseEstimator):
    """Neighbourhood network trained on one scan pair; predicts for any cloud."""

    def __init__(
        self,
        learning_rate=1e-4,
        epochs=300,
        threshold=0.01,
        use_pose_likelihood=True,
        logdet_hessian_mode="finite_difference",
        coordinate_scale=0.01,
        init_scale=0.001,
        neighborhood_radius=0.01,
        rng_seed=0,
    ):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.threshold = threshold
        self.use_pose_likelihood = use_pose_likelihood
        self.logdet_hessian_mode = logdet_hessian_mode
        self.coordinate_scale = coordinate_scale
        self.init_scale = init_scale
        self.neighborhood_radius = neighborhood_radius
        self.rng_seed = rng_seed

    def _config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            threshold=self.threshold,
            use_pose_likelihood=self.use_pose_likelihood,
            logdet_hessian_mode=self.logdet_hessian_mode,
            coordinate_scale=self.coordinate_scale,
            init_scale=self.init_scale,
            neighborhood_radius=self.neighborhood_radius,
            rng_seed=self.rng_seed,
        )

    def fit(self, X, y=None, P=None, T_tilde=None, Gamma=None):
        Q = check_points(X, allow_empty=False)
        if P is None or T_tilde is None:
            raise ValueError("fit needs the source scan P and the pose T_tilde")
        self.report_ = train(P, Q, T_tilde, Gamma, "mlp", self._config())
        self.params_ = self.report_.params
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_points(X, allow_empty=False) * self.coordinate_scale
        L = mlp_forward(X, self.params_, self.neighborhood_radius)
        return unscale_covariances(cholesky_build(L), self.coordinate_scale)
