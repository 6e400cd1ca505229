"""Malicious-client detection on a client distance matrix.

``detect_iterative`` repeatedly scores the clients still under determination
with LOF (k = floor(l/2) over the l remaining clients), removes every client
above the threshold and rescores the survivors, until a pass removes nobody.

``detect_refined`` runs one such pass at the coarse threshold, then looks for
candidates whose average distance to the other survivors is above the mean.
If those candidates are on average farther than the calibrated bound
``epsilon_d``, the threshold drops to their mean LOF and the iterative sweep
continues with it. The bound keeps an all-honest population from being cut
in half.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import TooFewClientsError
from .outlier import as_matrix, lof_all

log = logging.getLogger(__name__)

MODES = ("basic", "refined", "oracle")


@dataclass(frozen=True)
class DetectorConfig:
    """``epsilon_d=None`` means calibrate it from ``calibration_rounds``
    consecutive rounds starting at ``calibration_start``.

    ``per_class`` is the number of stimuli drawn per class. RDMs are built
    from pre-softmax scores unless ``use_logits`` is false, in which case
    the softmax probabilities are used. Mode ``oracle`` replaces detection
    by the ground-truth labels (ablations only).
    """

    delta: float = 1.5
    epsilon_d: float | None = None
    mode: str = "refined"
    min_remaining: int = 3
    per_class: int = 20
    use_logits: bool = True
    calibration_rounds: int = 5
    calibration_start: int = 0

    def __post_init__(self):
        if not self.delta > 1:
            raise ValueError(f"delta must exceed 1, got {self.delta}")
        if self.epsilon_d is not None and self.epsilon_d < 0:
            raise ValueError("epsilon_d must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"unknown detector mode {self.mode!r}")
        if self.min_remaining < 3:
            raise ValueError("min_remaining must be at least 3")
        if self.calibration_rounds < 1 or self.calibration_start < 0:
            raise ValueError("calibration window must start at >= 0 and span >= 1 round")

    def calibrating(self, t: int) -> bool:
        lo = self.calibration_start
        return self.epsilon_d is None and lo <= t < lo + self.calibration_rounds


@dataclass
class DetectionTrace:
    iterations: list[dict] = field(default_factory=list)
    delta_re: float | None = None
    candidates: list[int] = field(default_factory=list)
    cand_dist: float | None = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iterations,
            "delta_re": self.delta_re,
            "candidates": self.candidates,
            "cand_dist": self.cand_dist,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _lof_pass(mat: np.ndarray, remaining: list[int], threshold: float, trace: DetectionTrace | None) -> list[int]:
    sub = mat[np.ix_(remaining, remaining)]
    k = len(remaining) // 2
    scores = lof_all(sub, k).scores
    flagged = [c for c, s in zip(remaining, scores) if s > threshold]
    if trace is not None:
        trace.iterations.append({
            "k": k,
            "threshold": float(threshold),
            "clients": list(remaining),
            "scores": [float(s) for s in scores],
            "flagged": flagged,
        })
    return flagged


def _sweep(mat: np.ndarray, remaining: list[int], dec: np.ndarray, threshold: float,
           min_remaining: int, trace: DetectionTrace | None) -> list[int]:
    while len(remaining) >= min_remaining:
        flagged = _lof_pass(mat, remaining, threshold, trace)
        if not flagged:
            break
        dec[flagged] = 1
        remaining = [c for c in remaining if c not in flagged]
    return remaining


def _check_size(n: int, min_remaining: int) -> None:
    if n < min_remaining:
        raise TooFewClientsError(f"{n} clients, detection needs at least {min_remaining}")


def _warn_majority(dec: np.ndarray) -> None:
    if dec.sum() > len(dec) // 2:
        log.warning("detector flagged %d of %d clients, more than the benign-majority assumption allows",
                    int(dec.sum()), len(dec))


def detect_iterative(dist, delta: float = 1.5, min_remaining: int = 3,
                     trace: DetectionTrace | None = None) -> np.ndarray:
    """Decision vector (1 = malicious) from repeated LOF passes at ``delta``."""
    mat = as_matrix(dist)
    n = mat.shape[0]
    _check_size(n, min_remaining)
    dec = np.zeros(n, dtype=np.int64)
    _sweep(mat, list(range(n)), dec, delta, min_remaining, trace)
    _warn_majority(dec)
    return dec


def client_avg_distance(sub: np.ndarray) -> np.ndarray:
    """Average distance of each client to the others (zero diagonal assumed)."""
    return sub.sum(axis=1) / (sub.shape[0] - 1)


def detect_refined(dist, cfg: DetectorConfig, trace: DetectionTrace | None = None) -> np.ndarray:
    mat = as_matrix(dist)
    n = mat.shape[0]
    _check_size(n, cfg.min_remaining)
    eps = np.inf if cfg.epsilon_d is None else cfg.epsilon_d
    dec = np.zeros(n, dtype=np.int64)

    remaining = list(range(n))
    flagged = _lof_pass(mat, remaining, cfg.delta, trace)
    dec[flagged] = 1
    remaining = [c for c in remaining if c not in flagged]
    if len(remaining) < cfg.min_remaining:
        _warn_majority(dec)
        return dec

    sub = mat[np.ix_(remaining, remaining)]
    avg = client_avg_distance(sub)
    dyn_threshold = avg.mean()
    cand_pos = np.flatnonzero(avg > dyn_threshold)
    if cand_pos.size == 0:
        log.debug("no refinement candidates")
        _warn_majority(dec)
        return dec
    cand_dist = float(avg[cand_pos].mean())
    if trace is not None:
        trace.candidates = [remaining[i] for i in cand_pos]
        trace.cand_dist = cand_dist
    if cand_dist <= eps:
        _warn_majority(dec)
        return dec

    # Scores from before the first removal are stale: rescore the survivors.
    scores = lof_all(sub, len(remaining) // 2).scores
    delta_re = float(scores[cand_pos].mean())
    if trace is not None:
        trace.delta_re = delta_re
    _sweep(mat, remaining, dec, delta_re, cfg.min_remaining, trace)
    _warn_majority(dec)
    return dec


def detect(dist, cfg: DetectorConfig, trace: DetectionTrace | None = None) -> np.ndarray:
    if cfg.mode == "basic":
        return detect_iterative(dist, cfg.delta, cfg.min_remaining, trace)
    if cfg.mode == "refined":
        return detect_refined(dist, cfg, trace)
    raise ValueError(f"mode {cfg.mode!r} needs ground truth; it is handled by the simulator")


def calibrate_epsilon_d(history: Sequence) -> float:
    """Largest average client-to-others distance seen over honest rounds."""
    if len(history) == 0:
        raise ValueError("calibration needs at least one distance matrix")
    return float(max(client_avg_distance(as_matrix(d)).max() for d in history))
