"""Instance-separation algorithms behind a common assignment interface.

k-means, fuzzy c-means, DBSCAN, OPTICS and spectral clustering. The density
based methods and spectral clustering determine the cluster count themselves
(spectral takes k, density methods derive it); k-means and c-means need the
cluster count up front.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree
from sklearn.cluster import DBSCAN, OPTICS, KMeans, kmeans_plusplus

from plantscan.cloud import PointCloud
from plantscan.errors import ValidationError

NOISE = -1


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray            # per-point cluster id, NOISE for unassigned
    uncertain: np.ndarray         # per-point flag
    n_clusters: int
    runtime: float                # seconds
    membership: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "uncertain", np.asarray(self.uncertain, dtype=bool))
        ids = np.unique(labels[labels != NOISE])
        if len(ids) != self.n_clusters or (len(ids) and not np.array_equal(ids, np.arange(len(ids)))):
            raise ValidationError("cluster ids must be contiguous from 0")


def _contiguous(labels: np.ndarray) -> np.ndarray:
    """Renumber non-noise ids to 0..k-1 in order of first appearance."""
    out = np.full(len(labels), NOISE, dtype=np.int64)
    mapping: dict[int, int] = {}
    for i, lab in enumerate(labels):
        if lab == NOISE:
            continue
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def kmeans(points: np.ndarray, k: int, seed: int = 0,
           max_iter: int = 300, tol: float = 1e-6) -> ClusterAssignment:
    """Lloyd iterations from k-means++ seeding."""
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > len(points):
        raise ValidationError(f"k={k} exceeds {len(points)} points")
    t0 = time.perf_counter()
    km = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter,
                tol=tol, random_state=seed, algorithm="lloyd").fit(points)
    labels = _contiguous(km.labels_)
    return ClusterAssignment(labels, np.zeros(len(points), dtype=bool),
                             k, time.perf_counter() - t0)


def fuzzy_cmeans(points: np.ndarray, c: int, fuzzifier: float = 2.0,
                 seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
                 uncertain_below: float = 0.6) -> ClusterAssignment:
    """Alternating membership/centroid updates with exponent 2/(fuzzifier-1).

    Hard label is the argmax membership; a point is flagged uncertain when
    its maximum membership falls below ``uncertain_below``.
    """
    points = np.asarray(points, dtype=np.float64)
    if c < 1:
        raise ValidationError("c must be >= 1")
    if c > len(points):
        raise ValidationError(f"c={c} exceeds {len(points)} points")
    if fuzzifier <= 1:
        raise ValidationError("fuzzifier must be > 1")
    t0 = time.perf_counter()
    centroids, _ = kmeans_plusplus(points, n_clusters=c, random_state=seed)
    expo = 2.0 / (fuzzifier - 1.0)
    u = np.zeros((len(points), c))
    for _ in range(max_iter):
        d = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
        coincident = d < 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = d ** -expo
            u = inv / inv.sum(axis=1, keepdims=True)
        hit = coincident.any(axis=1)
        u[hit] = coincident[hit] / coincident[hit].sum(axis=1, keepdims=True)
        um = u ** fuzzifier
        new_centroids = (um.T @ points) / um.sum(axis=0)[:, None]
        shift = np.linalg.norm(new_centroids - centroids, axis=1).max()
        centroids = new_centroids
        if shift < tol:
            break
    labels = _contiguous(u.argmax(axis=1))
    uncertain = u.max(axis=1) < uncertain_below
    return ClusterAssignment(labels, uncertain, c, time.perf_counter() - t0,
                             membership=u)


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> ClusterAssignment:
    """Classic core/border/noise semantics; noise points are the uncertain set."""
    points = np.asarray(points, dtype=np.float64)
    if eps <= 0:
        raise ValidationError("eps must be positive")
    if min_pts < 1:
        raise ValidationError("min_pts must be >= 1")
    t0 = time.perf_counter()
    model = DBSCAN(eps=eps, min_samples=min_pts).fit(points)
    labels = _contiguous(model.labels_)
    return ClusterAssignment(labels, labels == NOISE,
                             int(labels.max() + 1) if len(labels) else 0,
                             time.perf_counter() - t0)


def optics(points: np.ndarray, min_pts: int = 8, xi: float = 0.05,
           max_eps: float = np.inf) -> ClusterAssignment:
    """Reachability ordering with xi-steepness cluster extraction; determines
    the cluster count itself. Unassigned points are flagged uncertain."""
    points = np.asarray(points, dtype=np.float64)
    if min_pts < 2:
        raise ValidationError("min_pts must be >= 2")
    t0 = time.perf_counter()
    model = OPTICS(min_samples=min_pts, xi=xi, cluster_method="xi",
                   max_eps=max_eps).fit(points)
    labels = _contiguous(model.labels_)
    return ClusterAssignment(labels, labels == NOISE,
                             int(labels.max() + 1) if len(labels) else 0,
                             time.perf_counter() - t0)


def spectral(points: np.ndarray, k: int, seed: int = 0,
             n_neighbors: int = 10) -> ClusterAssignment:
    """Symmetric k-NN affinity graph, normalized Laplacian, k smallest
    eigenvectors, then k-means in the spectral embedding."""
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if len(points) < k:
        raise ValidationError(f"k={k} exceeds {len(points)} points")
    t0 = time.perf_counter()
    n = len(points)
    if k == 1:
        return ClusterAssignment(np.zeros(n, dtype=np.int64),
                                 np.zeros(n, dtype=bool), 1,
                                 time.perf_counter() - t0)
    nn = min(n_neighbors + 1, n)
    tree = cKDTree(points)
    _, idx = tree.query(points, k=nn)
    rows = np.repeat(np.arange(n), nn - 1)
    cols = idx[:, 1:].ravel()
    W = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    W = W.maximum(W.T)                       # symmetric 0/1 affinity
    deg = np.asarray(W.sum(axis=1)).ravel()
    dinv = 1.0 / np.sqrt(np.maximum(deg, 1e-12))
    L = sp.identity(n) - sp.diags(dinv) @ W @ sp.diags(dinv)
    # smallest-k eigenvectors via shift-invert around a slightly negative point
    vals, vecs = spla.eigsh(L.tocsc(), k=k, sigma=-1e-5, which="LM",
                            v0=np.full(n, 1.0 / np.sqrt(n)))
    emb = vecs / np.maximum(np.linalg.norm(vecs, axis=1, keepdims=True), 1e-12)
    km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(emb)
    labels = _contiguous(km.labels_)
    return ClusterAssignment(labels, np.zeros(n, dtype=bool), k,
                             time.perf_counter() - t0)


METHODS = ("kmeans", "cmeans", "dbscan", "optics", "spectral")


def run_method(points: np.ndarray, method: str, seed: int = 0,
               **params) -> ClusterAssignment:
    """Dispatch to one of the five algorithms by name."""
    if method == "kmeans":
        if "k" not in params:
            raise ValidationError("kmeans requires an explicit k parameter")
        return kmeans(points, params["k"], seed=seed,
                      max_iter=params.get("max_iter", 300),
                      tol=params.get("tol", 1e-6))
    if method == "cmeans":
        if "k" not in params:
            raise ValidationError("cmeans requires an explicit k parameter")
        return fuzzy_cmeans(points, params["k"],
                            fuzzifier=params.get("fuzzifier", 2.0), seed=seed,
                            max_iter=params.get("max_iter", 300),
                            tol=params.get("tol", 1e-6))
    if method == "dbscan":
        return dbscan(points, params.get("eps", 0.25), params.get("min_pts", 8))
    if method == "optics":
        return optics(points, params.get("min_pts", 8), params.get("xi", 0.05),
                      params.get("max_eps", np.inf))
    if method == "spectral":
        if "k" not in params:
            raise ValidationError("spectral requires an explicit k parameter")
        return spectral(points, params["k"], seed=seed,
                        n_neighbors=params.get("n_neighbors", 10))
    raise ValidationError(f"unknown clustering method {method!r}")


def cluster_class(cloud: PointCloud, class_index: int, method: str = "optics",
                  seed: int = 0, **params) -> list[PointCloud]:
    """Split the points labelled ``class_index`` into per-instance clouds.

    Noise/uncertain points are excluded. Instances are ordered by centroid
    (x, then y, then z) so ids are reproducible.
    """
    if cloud.labels is None:
        raise ValidationError("cloud has no labels")
    mask = cloud.labels == class_index
    if not mask.any():
        return []
    sub = cloud.select(mask)
    assignment = run_method(sub.points, method, seed=seed, **params)
    instances = []
    for cid in range(assignment.n_clusters):
        inst = sub.select((assignment.labels == cid) & ~assignment.uncertain)
        if len(inst):
            instances.append(inst)
    instances.sort(key=lambda c: tuple(np.round(c.points.mean(axis=0), 9)))
    return instances
