"""Small point-neighborhood network that predicts per-point Cholesky factors.

Single-scale pipeline: farthest point sampling of region centers, ball
query, a shared two-layer encoder with max pooling per region, inverse
distance interpolation of region features back to the points, and a
decoder on ``[point feature, region feature]``.  Every selection step is
ordered canonically (by distance, then lexicographically by coordinates)
so permuting the input only permutes the output.

Backpropagation is written out by hand; :func:`mlp_backward` returns the
gradient of ``sum(G * output)`` for an upstream gradient ``G``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

ENCODER_DIMS = (3, 32, 64)
DECODER_DIMS = (128, 64, 6)
MAX_NEIGHBORS = 32
N_INTERP = 3
CENTER_RATIO = 4

PARAM_SHAPES = {
    "enc_w1": (3, 32),
    "enc_b1": (32,),
    "enc_w2": (32, 64),
    "enc_b2": (64,),
    "dec_w1": (128, 64),
    "dec_b1": (64,),
    "dec_w2": (64, 6),
    "dec_b2": (6,),
}
PARAM_ORDER = tuple(PARAM_SHAPES)


@dataclass
class MlpParams:
    """Weights stored as a flat vector with named views."""

    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=float).reshape(-1)
        if self.flat.size != n_params():
            raise ValueError(f"expected {n_params()} parameters, got {self.flat.size}")

    def __getitem__(self, name):
        start = 0
        for key in PARAM_ORDER:
            size = int(np.prod(PARAM_SHAPES[key]))
            if key == name:
                return self.flat[start : start + size].reshape(PARAM_SHAPES[key])
            start += size
        raise KeyError(name)

    def copy(self):
        return MlpParams(self.flat.copy())

    @classmethod
    def from_dict(cls, d):
        return cls(np.concatenate([np.asarray(d[k], dtype=float).reshape(-1) for k in PARAM_ORDER]))


def n_params():
    return int(sum(np.prod(s) for s in PARAM_SHAPES.values()))


def init_params(rng_seed=0, init_scale=0.05):
    """He-style initialization; the decoder starts near ``init_scale * I``."""
    rng = np.random.default_rng(rng_seed)
    d = {}
    for name, shape in PARAM_SHAPES.items():
        if name.endswith(("b1", "b2")):
            d[name] = np.zeros(shape)
        else:
            d[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
    d["dec_w2"] *= 0.01 * init_scale
    d["dec_b2"] = init_scale * np.array([1.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    return MlpParams.from_dict(d)


def _canonical_order(X):
    # lexsort uses the last key as primary
    return np.lexsort((X[:, 2], X[:, 1], X[:, 0]))


def farthest_point_sampling(X, m):
    """Indices of ``m`` well-spread points, independent of input order.

    Starts from the point farthest from the centroid; ties always go to
    the lexicographically smallest coordinates.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    m = min(m, n)
    order = _canonical_order(X)
    Xc = X[order]
    dist = np.linalg.norm(Xc - X.mean(axis=0), axis=1)
    chosen = [int(np.argmax(dist))]
    mind = np.linalg.norm(Xc - Xc[chosen[0]], axis=1)
    for _ in range(1, m):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(Xc - Xc[nxt], axis=1))
    return order[np.array(chosen, dtype=int)]


def _nearest_sorted(X, rank, center, idx, k):
    """Up to ``k`` of ``idx`` closest to ``center``, ties by canonical rank."""
    d = np.linalg.norm(X[idx] - center, axis=1)
    sel = np.lexsort((rank[idx], d))[:k]
    return idx[sel]


@dataclass
class Neighborhoods:
    centers: np.ndarray  # (M,) point indices
    groups: np.ndarray  # (M, K) point indices, padded by repetition
    interp_idx: np.ndarray  # (N, 3) center indices
    interp_w: np.ndarray  # (N, 3)
    nearest_center: np.ndarray  # (N,)


def build_neighborhoods(X, radius):
    X = np.asarray(X, dtype=float)
    n = len(X)
    rank = np.empty(n, dtype=int)
    rank[_canonical_order(X)] = np.arange(n)
    centers = farthest_point_sampling(X, int(np.ceil(n / CENTER_RATIO)))
    tree = cKDTree(X)
    groups = np.empty((len(centers), MAX_NEIGHBORS), dtype=int)
    for r, c in enumerate(centers):
        idx = np.asarray(tree.query_ball_point(X[c], radius), dtype=int)
        if idx.size == 0:
            idx = np.array([c])
        g = _nearest_sorted(X, rank, X[c], idx, MAX_NEIGHBORS)
        groups[r] = np.resize(g, MAX_NEIGHBORS)
    k = min(N_INTERP, len(centers))
    # stable sort over centers listed in canonical order breaks ties canonically
    corder = np.argsort(rank[centers], kind="stable")
    D = np.linalg.norm(X[:, None, :] - X[centers][corder][None, :, :], axis=2)
    sel = np.argsort(D, axis=1, kind="stable")[:, :k]
    interp_idx = corder[sel]
    dists = np.take_along_axis(D, sel, axis=1)
    w = 1.0 / (dists + 1e-8)
    w /= w.sum(axis=1, keepdims=True)
    return Neighborhoods(centers, groups, interp_idx, w, interp_idx[:, 0])


def _encoder(params, U):
    """Shared encoder on ``(..., 3)`` inputs; returns output and cache."""
    z1 = U @ params["enc_w1"] + params["enc_b1"]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params["enc_w2"] + params["enc_b2"]
    a2 = np.maximum(z2, 0.0)
    return a2, (U, z1, a1, z2)


def _encoder_backward(params, cache, G, grads):
    U, z1, a1, z2 = cache
    G2 = G * (z2 > 0)
    grads["enc_w2"] += a1.reshape(-1, a1.shape[-1]).T @ G2.reshape(-1, G2.shape[-1])
    grads["enc_b2"] += G2.reshape(-1, G2.shape[-1]).sum(axis=0)
    G1 = (G2 @ params["enc_w2"].T) * (z1 > 0)
    grads["enc_w1"] += U.reshape(-1, 3).T @ G1.reshape(-1, G1.shape[-1])
    grads["enc_b1"] += G1.reshape(-1, G1.shape[-1]).sum(axis=0)


def mlp_forward(cloud, params, neighborhood_radius, nbhd=None, return_cache=False):
    """Per-point factor entries ``(N, 6)`` in the packed lower-triangular order."""
    if neighborhood_radius <= 0:
        raise ValueError("neighborhood_radius must be positive")
    X = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=float)
    if len(X) == 0:
        raise ValueError("cloud is empty")
    nb = nbhd if nbhd is not None else build_neighborhoods(X, neighborhood_radius)
    r = neighborhood_radius
    # region branch
    U_reg = (X[nb.groups] - X[nb.centers][:, None, :]) / r  # (M, K, 3)
    F_reg, cache_reg = _encoder(params, U_reg)  # (M, K, 64)
    arg = np.argmax(F_reg, axis=1)  # (M, 64)
    pooled = np.take_along_axis(F_reg, arg[:, None, :], axis=1)[:, 0, :]
    region = np.einsum("nk,nkf->nf", nb.interp_w, pooled[nb.interp_idx])  # (N, 64)
    # point branch
    U_pt = (X - X[nb.centers][nb.nearest_center]) / r
    F_pt, cache_pt = _encoder(params, U_pt)
    # decoder
    h = np.concatenate([F_pt, region], axis=1)
    z3 = h @ params["dec_w1"] + params["dec_b1"]
    a3 = np.maximum(z3, 0.0)
    out = a3 @ params["dec_w2"] + params["dec_b2"]
    if return_cache:
        cache = dict(nb=nb, cache_reg=cache_reg, arg=arg, cache_pt=cache_pt, h=h, z3=z3, a3=a3)
        return out, cache
    return out


def mlp_backward(params, cache, G):
    """Parameter gradient (flat) of ``sum(G * out)``."""
    grads = {k: np.zeros(s) for k, s in PARAM_SHAPES.items()}
    nb = cache["nb"]
    grads["dec_w2"] += cache["a3"].T @ G
    grads["dec_b2"] += G.sum(axis=0)
    G3 = (G @ params["dec_w2"].T) * (cache["z3"] > 0)
    grads["dec_w1"] += cache["h"].T @ G3
    grads["dec_b1"] += G3.sum(axis=0)
    Gh = G3 @ params["dec_w1"].T
    G_pt, G_region = Gh[:, :64], Gh[:, 64:]
    _encoder_backward(params, cache["cache_pt"], G_pt, grads)
    M = len(nb.centers)
    G_pooled = np.zeros((M, 64))
    np.add.at(G_pooled, nb.interp_idx, nb.interp_w[:, :, None] * G_region[:, None, :])
    arg = cache["arg"]
    U_reg = cache["cache_reg"][0]
    G_F = np.zeros(U_reg.shape[:2] + (64,))
    np.put_along_axis(G_F, arg[:, None, :], G_pooled[:, None, :], axis=1)
    _encoder_backward(params, cache["cache_reg"], G_F, grads)
    return np.concatenate([grads[k].reshape(-1) for k in PARAM_ORDER])
