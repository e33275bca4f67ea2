"""Distribution-matching and neighbourhood metrics.

Exact optimal transport between equal-size clouds is solved as a linear
assignment problem (scipy's shortest augmenting path solver).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .errors import DomainError, ShapeError

logger = logging.getLogger(__name__)

EXACT_OT_MAX = 512
SUBSAMPLE_SIZE = 200


def _cloud(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise DomainError("point cloud must be a non-empty (n, m) array")
    if not np.all(np.isfinite(a)):
        raise DomainError("point cloud has non-finite entries")
    return a


@dataclass
class Coupling:
    perm: np.ndarray  # row i of A is matched to row perm[i] of B
    cost: float       # total squared Euclidean cost


def ot_coupling(a, b) -> Coupling:
    """Exact minimum-cost bijection between equal-size batches under squared Euclidean cost."""
    a, b = _cloud(a), _cloud(b)
    if a.shape != b.shape:
        raise ShapeError(f"coupled batches must have equal shapes, got {a.shape} and {b.shape}")
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(a.shape[0], dtype=int)
    perm[rows] = cols
    return Coupling(perm=perm, cost=float(cost[rows, cols].sum()))


def _matched(a, b, seed):
    a, b = _cloud(a), _cloud(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError("clouds live in different dimensions")
    if a.shape[0] != b.shape[0] or a.shape[0] > EXACT_OT_MAX:
        n = min(SUBSAMPLE_SIZE, a.shape[0], b.shape[0])
        rng = np.random.default_rng(seed)
        ia = rng.choice(a.shape[0], n, replace=False)
        # equal sizes share one index draw, so identical clouds stay identical
        ib = ia if a.shape[0] == b.shape[0] else rng.choice(b.shape[0], n, replace=False)
        a, b = a[ia], b[ib]
    c = ot_coupling(a, b)
    return a, b[c.perm]


def wasserstein2(a, b, seed: int = 0) -> float:
    """Exact 2-Wasserstein distance between empirical clouds.

    Unequal or large (> 512) clouds are first subsampled to
    ``min(200, |A|, |B|)`` points each with ``seed``.
    """
    a, b = _matched(a, b, seed)
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def mean_l2(a, b, seed: int = 0) -> float:
    """Mean Euclidean distance between OT-matched points."""
    a, b = _matched(a, b, seed)
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def mmd_linear(a, b) -> float:
    """Biased linear-kernel MMD^2, i.e. the squared distance between the means."""
    a, b = _cloud(a), _cloud(b)
    return float(max(np.sum((a.mean(0) - b.mean(0)) ** 2), 0.0))


def _check_distance_matrix(d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ShapeError("distance matrix must be square")
    return d


def knn_sets(d, k: int) -> np.ndarray:
    """Indices of the k nearest neighbours per row, self excluded, ties broken by index."""
    d = _check_distance_matrix(d)
    n = d.shape[0]
    if not 0 < k < n:
        raise DomainError(f"k must satisfy 0 < k < n = {n}")
    out = np.empty((n, k), dtype=int)
    for i in range(n):
        others = np.delete(np.arange(n), i)
        order = np.lexsort((others, d[i, others]))
        out[i] = others[order[:k]]
    return out


def knn_overlap(d1, d2, k: int) -> float:
    """Average fraction of k-nearest neighbours shared between two distance matrices."""
    d1, d2 = _check_distance_matrix(d1), _check_distance_matrix(d2)
    if d1.shape != d2.shape:
        raise ShapeError("distance matrices differ in size")
    n1, n2 = knn_sets(d1, k), knn_sets(d2, k)
    shared = [len(set(a) & set(b)) / k for a, b in zip(n1, n2)]
    return float(np.mean(shared))


def spearman(x, y) -> float:
    """Pearson correlation of average ranks; ``nan`` when either side has constant ranks."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 3:
        raise ShapeError("spearman needs two equal-length sequences of length >= 3")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx**2) * np.sum(ry**2))
    if denom == 0:
        return float("nan")
    return float(np.sum(rx * ry) / denom)


def rowwise_spearman(d1, d2) -> float:
    """Mean over points of the rank correlation between their distances to all other points."""
    d1, d2 = _check_distance_matrix(d1), _check_distance_matrix(d2)
    n = d1.shape[0]
    vals = []
    for i in range(n):
        mask = np.arange(n) != i
        vals.append(spearman(d1[i, mask], d2[i, mask]))
    return float(np.nanmean(vals))


def euclidean_distances(z) -> np.ndarray:
    z = _cloud(z)
    return cdist(z, z)


@dataclass
class ConsistencyResult:
    value: float
    degenerate_pairs: int


def _pearson(u: np.ndarray, v: np.ndarray) -> float | None:
    u = u - u.mean()
    v = v - v.mean()
    denom = np.sqrt(np.dot(u, u) * np.dot(v, v))
    if denom == 0:
        return None
    return float(np.dot(u, v) / denom)


def velocity_consistency(z, v, k: int = 30, details: bool = False):
    """Mean Pearson correlation (across coordinates) between each cell's velocity and its k latent neighbours'.

    Pairs involving a zero-variance velocity count as correlation 0 and are tallied.
    """
    z, v = _cloud(z), _cloud(v)
    if z.shape[0] != v.shape[0]:
        raise ShapeError("latents and velocities must have the same number of rows")
    n = z.shape[0]
    if not n > k:
        raise DomainError(f"need more than k={k} cells")
    neigh = knn_sets(cdist(z, z), k)
    degenerate = 0
    per_cell = np.empty(n)
    for j in range(n):
        corrs = []
        for i in neigh[j]:
            r = _pearson(v[j], v[i])
            if r is None:
                degenerate += 1
                r = 0.0
            corrs.append(r)
        per_cell[j] = np.mean(corrs)
    if degenerate:
        logger.info("velocity consistency: %d zero-variance pairs", degenerate)
    value = float(per_cell.mean())
    return ConsistencyResult(value, degenerate) if details else value


def standardize_like(generated, reference) -> np.ndarray:
    """Standardise ``generated`` with the per-dimension mean and std of ``reference``."""
    g, r = _cloud(generated), _cloud(reference)
    std = r.std(axis=0)
    std[std == 0] = 1.0
    return (g - r.mean(axis=0)) / std
