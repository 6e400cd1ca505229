"""Local outlier factor over a precomputed distance matrix.

Neighbourhoods keep ties: the k-distance neighbourhood of ``p`` contains every
other point no farther than its k-th nearest neighbour, so it can hold more
than ``k`` points. (scikit-learn truncates to exactly ``k``; we do not.)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import TooFewClientsError

log = logging.getLogger(__name__)

LRD_CAP = 1e12


@dataclass(frozen=True, eq=False)
class LofScores:
    scores: np.ndarray
    k: int
    capped: tuple[int, ...] = ()

    def __len__(self) -> int:
        return self.scores.shape[0]


def as_matrix(dist) -> np.ndarray:
    mat = getattr(dist, "mat", dist)
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"distance matrix must be square, got shape {mat.shape}")
    return mat


def _check_k(L: int, k: int) -> None:
    if not 1 <= k <= L - 1:
        raise ValueError(f"k={k} out of range [1, {L - 1}]")


def _others(mat: np.ndarray, p: int) -> np.ndarray:
    return np.delete(np.arange(mat.shape[0]), p)


def k_distance(dist, p: int, k: int) -> float:
    mat = as_matrix(dist)
    _check_k(mat.shape[0], k)
    return float(np.sort(mat[p, _others(mat, p)])[k - 1])


def k_neighborhood(dist, p: int, k: int) -> set[int]:
    mat = as_matrix(dist)
    kd = k_distance(mat, p, k)
    return {int(q) for q in _others(mat, p) if mat[p, q] <= kd}


def reach_dist(dist, i: int, j: int, k: int) -> float:
    """Reachability distance of ``i`` to ``j``: ``max(k_distance(j), d(i, j))``."""
    if i == j:
        raise ValueError("reachability distance of a point to itself is undefined")
    mat = as_matrix(dist)
    return max(k_distance(mat, j, k), float(mat[i, j]))


def lrd(dist, p: int, k: int) -> float:
    mat = as_matrix(dist)
    neigh = k_neighborhood(mat, p, k)
    total = sum(reach_dist(mat, p, q, k) for q in neigh)
    if total <= 0:
        log.warning("client %d has zero reachability sum; lrd capped at %g", p, LRD_CAP)
        return LRD_CAP
    return min(len(neigh) / total, LRD_CAP)


def lof(dist, p: int, k: int) -> float:
    mat = as_matrix(dist)
    own = lrd(mat, p, k)
    neigh = k_neighborhood(mat, p, k)
    return sum(lrd(mat, q, k) for q in neigh) / len(neigh) / own


def _tables(mat: np.ndarray, k: int):
    """k-distances, neighbourhood mask and reachability matrix for all points."""
    L = mat.shape[0]
    off = ~np.eye(L, dtype=bool)
    masked = np.where(off, mat, np.inf)
    kdist = np.sort(masked, axis=1)[:, k - 1]
    neigh = off & (mat <= kdist[:, None])
    reach = np.maximum(kdist[None, :], mat)
    return kdist, neigh, reach


def lof_all(dist, k: int) -> LofScores:
    mat = as_matrix(dist)
    L = mat.shape[0]
    if L < 3:
        raise TooFewClientsError(f"LOF needs at least 3 clients, got {L}")
    _check_k(L, k)
    _, neigh, reach = _tables(mat, k)
    counts = neigh.sum(axis=1)
    sums = np.where(neigh, reach, 0.0).sum(axis=1)
    capped = tuple(int(i) for i in np.flatnonzero(sums <= 0))
    with np.errstate(divide="ignore"):
        dens = np.where(sums > 0, counts / np.where(sums > 0, sums, 1.0), LRD_CAP)
    dens = np.minimum(dens, LRD_CAP)
    if capped:
        log.warning("zero reachability sum for clients %s; lrd capped at %g", list(capped), LRD_CAP)
    scores = (neigh @ dens) / counts / dens
    return LofScores(scores, k, capped)


def reach_bounds(dist, p: int, k: int) -> tuple[float, float]:
    """Lower and upper LOF bounds of ``p`` from reachability extremes.

    The bounds are ``min reach(p, .) / max reach(q, .)`` and
    ``max reach(p, .) / min reach(q, .)``, where ``q`` runs over the
    neighbours of ``p`` and the second argument over each point's own
    neighbourhood.
    """
    mat = as_matrix(dist)
    _, neigh, reach = _tables(mat, k)
    own = reach[p, neigh[p]]
    nbrs = np.flatnonzero(neigh[p])
    second = np.concatenate([reach[q, neigh[q]] for q in nbrs])
    return float(own.min() / second.max()), float(own.max() / second.min())
