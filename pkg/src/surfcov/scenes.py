"""Synthetic scenes with a known surface model.

Surfaces are covered by Gaussian components whose covariance is flat along
the tangent plane, ``B diag(sigma_t^2, sigma_t^2, sigma_n^2) B^T`` with
``B = [u, v, n]``.  Each scan draws independent samples of the components,
so the ground-truth covariance and normal of every point are known.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import PoseSE3, random_pose, se3_exp

SIGMA_T = 0.1
SIGMA_N = 0.005
NOISE_LEVELS = (0.0, 0.01, 0.02, 0.03)


def tangent_basis(n):
    """Deterministic orthonormal ``(u, v)`` completing unit ``n``."""
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    a = np.eye(3)[np.argmin(np.abs(n))]
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


@dataclass(frozen=True)
class Plane:
    """Rectangle centred at ``center``; ``size`` is measured along the tangent basis."""

    center: tuple
    normal: tuple
    size: tuple

    def basis(self):
        return tangent_basis(self.normal)

    def sites(self, spacing):
        u, v = self.basis()
        nu = max(1, int(round(self.size[0] / spacing)))
        nv = max(1, int(round(self.size[1] / spacing)))
        a = (np.arange(nu) + 0.5) * self.size[0] / nu - self.size[0] / 2
        b = (np.arange(nv) + 0.5) * self.size[1] / nv - self.size[1] / 2
        A, B = np.meshgrid(a, b, indexing="ij")
        pts = np.asarray(self.center, dtype=float) + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
        n = np.asarray(self.normal, dtype=float)
        n = n / np.linalg.norm(n)
        return pts, np.tile(n, (len(pts), 1))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; components cover the six faces."""

    center: tuple
    size: tuple

    def faces(self):
        c = np.asarray(self.center, dtype=float)
        s = np.asarray(self.size, dtype=float)
        out = []
        for ax in range(3):
            others = [k for k in range(3) if k != ax]
            for sign in (-1.0, 1.0):
                n = np.zeros(3)
                n[ax] = sign
                u, v = tangent_basis(n)
                # extents of the face along its own tangent basis
                ext = (abs(u[others]) @ s[others], abs(v[others]) @ s[others])
                out.append(Plane(tuple(c + n * s[ax] / 2), tuple(n), ext))
        return out

    def sites(self, spacing):
        parts = [f.sites(spacing) for f in self.faces()]
        return np.vstack([p for p, _ in parts]), np.vstack([n for _, n in parts])


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sites(self, spacing):
        n = max(4, int(round(4 * np.pi * self.radius**2 / spacing**2)))
        # Fibonacci lattice
        k = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * k / n)
        theta = np.pi * (1 + 5**0.5) * k
        d = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
        return np.asarray(self.center, dtype=float) + self.radius * d, d


PRIMITIVES = {"plane": Plane, "box": Box, "sphere": Sphere}


def primitive_from_dict(d):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive type {kind!r}")
    try:
        return PRIMITIVES[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except TypeError as exc:
        raise ValueError(f"bad {kind} primitive: {exc}") from exc


def primitive_to_dict(p):
    kind = {Plane: "plane", Box: "box", Sphere: "sphere"}[type(p)]
    out = {"type": kind}
    for k, v in p.__dict__.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def component_covariances(normals, sigma_t=SIGMA_T, sigma_n=SIGMA_N):
    C = np.empty((len(normals), 3, 3))
    for i, n in enumerate(normals):
        u, v = tangent_basis(n)
        B = np.stack([u, v, n / np.linalg.norm(n)], axis=1)
        C[i] = B @ np.diag([sigma_t**2, sigma_t**2, sigma_n**2]) @ B.T
    return C


def sample_components(means, covs, rng, repeats=1):
    """``repeats`` samples per component, grouped by component."""
    w, V = np.linalg.eigh(covs)
    F = V * np.sqrt(np.clip(w, 0.0, None))[:, None, :]
    idx = np.repeat(np.arange(len(means)), repeats)
    z = rng.standard_normal((len(idx), 3))
    return means[idx] + np.einsum("nij,nj->ni", F[idx], z), idx


@dataclass
class SceneSpec:
    primitives: list
    spacing: float = 0.45
    sigma_t: float = SIGMA_T
    sigma_n: float = SIGMA_N
    source_samples: int = 1
    max_angle_deg: float = 60.0
    max_translation: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for p in self.primitives:
            if not isinstance(p, (Plane, Box, Sphere)):
                raise ValueError(f"invalid primitive {p!r}")
        if self.spacing <= 0 or self.sigma_t < 0 or self.sigma_n < 0 or self.noise_sigma < 0:
            raise ValueError("spacing must be positive and noise levels non-negative")
        if self.source_samples < 1:
            raise ValueError("source_samples must be at least 1")

    def to_dict(self):
        d = dict(self.__dict__)
        d["primitives"] = [primitive_to_dict(p) for p in self.primitives]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["primitives"] = [primitive_from_dict(p) for p in d.get("primitives", [])]
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown scene options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    means: np.ndarray
    covariances: np.ndarray
    normals: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    p_component: np.ndarray
    q_component: np.ndarray
    T_star: PoseSE3
    T_tilde: PoseSE3
    noise_twist: np.ndarray = field(default_factory=lambda: np.zeros(6))

    @property
    def q_normals(self):
        return self.normals[self.q_component]

    @property
    def q_covariances(self):
        return self.covariances[self.q_component]

    @property
    def p_covariances(self):
        R = self.T_star.rotation
        return R.T @ self.covariances[self.p_component] @ R


def scene_sites(spec):
    parts = [p.sites(spec.spacing) for p in spec.primitives]
    return np.vstack([m for m, _ in parts]), np.vstack([n for _, n in parts])


def synth_scene(spec, rng_seed=0):
    """Sample target ``Q`` (world frame) and source ``P`` (sensor frame of ``T_star``).

    ``T_star`` maps ``P`` onto the surface in ``Q``'s frame.  The recorded
    pose is ``T_tilde = T_star @ exp((0, nu))`` with ``nu ~ N(0, noise_sigma^2 I)``.
    """
    rng = np.random.default_rng(rng_seed)
    means, normals = scene_sites(spec)
    covs = component_covariances(normals, spec.sigma_t, spec.sigma_n)
    T_star = random_pose(rng, np.deg2rad(spec.max_angle_deg), spec.max_translation)
    Q, q_idx = sample_components(means, covs, rng, 1)
    X, p_idx = sample_components(means, covs, rng, spec.source_samples)
    P = T_star.inverse().apply(X)
    twist = np.zeros(6)
    if spec.noise_sigma > 0:
        twist[3:] = rng.normal(0.0, spec.noise_sigma, 3)
    T_tilde = T_star @ se3_exp(twist) if spec.noise_sigma > 0 else T_star
    return SyntheticScene(spec, means, covs, normals, P, Q, p_idx, q_idx, T_star, T_tilde, twist)


def axis_rect(lo, hi, normal_sign=1.0):
    """Axis-aligned rectangle spanning ``lo``..``hi`` with one collapsed axis."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    ax = int(np.argmin(np.abs(hi - lo)))
    n = np.zeros(3)
    n[ax] = normal_sign
    u, v = tangent_basis(n)
    ext = hi - lo
    return Plane(tuple((lo + hi) / 2), tuple(n), (float(abs(u) @ ext), float(abs(v) @ ext)))


def planar_scene_spec(noise_sigma=0.0, **kw):
    """Room corner of three orthogonal planes, 500 components 0.45 m apart.

    The source scan samples every component several times so each target
    point collects enough pairs to pin down its covariance.
    """
    s = 0.45
    prims = [
        axis_rect((s, s, 0.0), (21 * s, 11 * s, 0.0)),
        axis_rect((s, 0.0, s), (21 * s, 0.0, 9 * s)),
        axis_rect((0.0, s, s), (0.0, 11 * s, 15 * s)),
    ]
    kw.setdefault("source_samples", 8)
    kw.setdefault("max_angle_deg", 30.0)
    kw.setdefault("max_translation", 0.5)
    return SceneSpec(prims, spacing=s, noise_sigma=noise_sigma, **kw)


# ---------------------------------------------------------------- sequences


@dataclass
class ScanSequence:
    scans: list
    poses: list
    components: list
    means: np.ndarray
    covariances: np.ndarray
    normals: np.ndarray

    def scan_covariances(self, k):
        R = self.poses[k].rotation
        return R.T @ self.covariances[self.components[k]] @ R


def corridor_primitives(length=24.0, width=3.0, height=2.5, pillar_every=3.0):
    prims = [
        Plane((length / 2, 0.0, 0.0), (0.0, 0.0, 1.0), (width, length)),
        Plane((length / 2, 0.0, height), (0.0, 0.0, -1.0), (width, length)),
        Plane((length / 2, width / 2, height / 2), (0.0, -1.0, 0.0), (length, height)),
        Plane((length / 2, -width / 2, height / 2), (0.0, 1.0, 0.0), (length, height)),
    ]
    # pillars break the translational symmetry along the corridor
    x = pillar_every / 2
    side = 1.0
    while x < length:
        prims.append(Box((x, side * (width / 2 - 0.2), height / 2), (0.4, 0.4, height)))
        x += pillar_every
        side = -side
    return prims


def corridor_sequence(n_scans=20, rng_seed=0, step=0.4, sensor_range=7.0, spacing=0.4,
                      sigma_t=SIGMA_T, sigma_n=SIGMA_N):
    """Sensor moving down a corridor; scan ``k`` is expressed in its own frame."""
    length = step * n_scans + 2 * sensor_range
    prims = corridor_primitives(length=length)
    rng = np.random.default_rng(rng_seed)
    spec = SceneSpec(prims, spacing=spacing, sigma_t=sigma_t, sigma_n=sigma_n)
    means, normals = scene_sites(spec)
    covs = component_covariances(normals, sigma_t, sigma_n)
    poses, scans, comps = [], [], []
    for k in range(n_scans):
        yaw = 0.05 * np.sin(0.7 * k)
        pos = np.array([sensor_range + step * k, 0.2 * np.sin(0.3 * k), 1.2])
        T = PoseSE3(np.array([[np.cos(yaw), -np.sin(yaw), 0], [np.sin(yaw), np.cos(yaw), 0], [0, 0, 1]]), pos)
        vis = np.flatnonzero(np.linalg.norm(means - pos, axis=1) <= sensor_range)
        X, idx = sample_components(means[vis], covs[vis], rng, 1)
        poses.append(T)
        scans.append(T.inverse().apply(X))
        comps.append(vis[idx])
    return ScanSequence(scans, poses, comps, means, covs, normals)
