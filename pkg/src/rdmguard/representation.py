"""Sampling-based model representations and client dissimilarity.

Every client model is probed with the same class-balanced stimulus set drawn
from the server's clean test data. The pairwise cosine distances between its
output vectors form the client's representational dissimilarity matrix
(RDM); clients are compared through the Pearson distance of their RDMs'
strict upper triangles.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import ConstantObservationError, DegenerateVectorError, ShapeError

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
VAR_EPS = 1e-18
CONSTANT_RDM_DISTANCE = 2.0


@dataclass(frozen=True, eq=False)
class StimulusSet:
    samples: np.ndarray
    per_class: int
    class_count: int
    source_labels: np.ndarray
    source_indices: np.ndarray

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True, eq=False)
class Rdm:
    mat: np.ndarray

    @property
    def size(self) -> int:
        return self.mat.shape[0]


@dataclass(frozen=True, eq=False)
class ClientDistanceMatrix:
    """Pearson distances between clients.

    ``degenerate`` lists clients whose RDM was constant; they sit at distance
    ``CONSTANT_RDM_DISTANCE`` from everybody else.
    """

    mat: np.ndarray
    degenerate: tuple[int, ...] = ()

    def __len__(self) -> int:
        return self.mat.shape[0]


def sample_stimuli(test: LabeledDataset, per_class: int, seed: int) -> StimulusSet:
    """Draw ``per_class`` test samples of every class without replacement."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    picked = []
    for c in range(test.class_count):
        members = np.flatnonzero(test.labels == c)
        if members.size < per_class:
            raise ValueError(f"class {c} has {members.size} test samples, {per_class} requested")
        picked.append(rng.choice(members, size=per_class, replace=False))
    idx = np.concatenate(picked)
    return StimulusSet(test.features[idx], per_class, test.class_count, test.labels[idx], idx)


def cosine_distance(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"vectors of shape {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= NORM_EPS or nv <= NORM_EPS:
        raise DegenerateVectorError("cosine distance of a near-zero vector")
    return float(np.clip(1.0 - np.dot(u, v) / (nu * nv), 0.0, 2.0))


def output_vectors(model: nn.MlpModel, stimuli: StimulusSet, use_logits: bool = False) -> np.ndarray:
    if use_logits:
        return nn.logits(model, stimuli.samples)
    return nn.forward(model, stimuli.samples)


def rdm_from_outputs(outputs: np.ndarray) -> Rdm:
    """Cosine-distance matrix between the rows of ``outputs``."""
    v = np.asarray(outputs, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms <= NORM_EPS):
        raise DegenerateVectorError("an output vector has near-zero norm")
    unit = v / norms[:, None]
    mat = 1.0 - unit @ unit.T
    mat = 0.5 * (mat + mat.T)
    np.clip(mat, 0.0, 2.0, out=mat)
    np.fill_diagonal(mat, 0.0)
    return Rdm(mat)


def extract_rdm(model: nn.MlpModel, stimuli: StimulusSet, use_logits: bool = False) -> Rdm:
    return rdm_from_outputs(output_vectors(model, stimuli, use_logits))


@functools.lru_cache(maxsize=8)
def _upper_flat_index(size: int) -> np.ndarray:
    rows, cols = np.triu_indices(size, k=1)
    idx = rows * size + cols
    idx.setflags(write=False)
    return idx


def flatten_upper(rdm: Rdm | np.ndarray) -> np.ndarray:
    """Strict upper triangle, row-major: length n(n-1)/2."""
    mat = rdm.mat if isinstance(rdm, Rdm) else np.asarray(rdm)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {mat.shape}")
    return np.take(mat, _upper_flat_index(mat.shape[0]))


def rdm_from_upper(vec: np.ndarray, size: int) -> Rdm:
    """Inverse of :func:`flatten_upper` (symmetric, zero diagonal)."""
    mat = np.zeros((size, size))
    rows, cols = np.triu_indices(size, k=1)
    mat[rows, cols] = vec
    mat[cols, rows] = vec
    return Rdm(mat)


def _is_constant(obs: np.ndarray) -> bool:
    return float(np.mean((obs - obs.mean()) ** 2)) <= VAR_EPS


def pearson_distance(obs1, obs2) -> float:
    """One minus the sample Pearson correlation of two observation vectors."""
    u = np.asarray(obs1, dtype=np.float64)
    v = np.asarray(obs2, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"observation vectors of shape {u.shape} and {v.shape}")
    if u.size < 2:
        raise ValueError("need at least two observations")
    if _is_constant(u) or _is_constant(v):
        raise ConstantObservationError("correlation undefined for a constant observation vector")
    du = u - u.mean()
    dv = v - v.mean()
    r = np.dot(du, dv) / (np.sqrt(np.dot(du, du)) * np.sqrt(np.dot(dv, dv)))
    return float(np.clip(1.0 - r, 0.0, 2.0))


def client_distance_matrix(rdms: Sequence[Rdm]) -> ClientDistanceMatrix:
    """Pairwise Pearson distances between flattened RDMs.

    A client with a constant RDM (for instance a collapsed model predicting
    one class everywhere) gets ``CONSTANT_RDM_DISTANCE`` to all others instead
    of aborting the round.
    """
    if len(rdms) < 2:
        raise ValueError("need at least two RDMs")
    obs = [flatten_upper(r) for r in rdms]
    if len({o.size for o in obs}) != 1:
        raise ShapeError("RDMs differ in size")
    n = len(obs)
    degenerate = tuple(i for i, o in enumerate(obs) if _is_constant(o))
    if degenerate:
        log.warning("constant RDM for clients %s; placing them at maximal distance", list(degenerate))
    bad = set(degenerate)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = CONSTANT_RDM_DISTANCE if (i in bad or j in bad) else pearson_distance(obs[i], obs[j])
            mat[i, j] = mat[j, i] = d
    return ClientDistanceMatrix(mat, degenerate)


def model_distance_matrix(models: Sequence[nn.MlpModel], stimuli: StimulusSet, use_logits: bool = False) -> ClientDistanceMatrix:
    return client_distance_matrix([extract_rdm(m, stimuli, use_logits) for m in models])


def write_matrix_csv(mat: np.ndarray, path) -> None:
    """Headerless square matrix with 17 significant digits."""
    np.savetxt(path, np.asarray(mat), delimiter=",", fmt="%.17g")


def read_matrix_csv(path) -> np.ndarray:
    mat = np.loadtxt(path, delimiter=",", ndmin=2)
    if mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"{path}: matrix is {mat.shape[0]}x{mat.shape[1]}, expected square")
    return mat
