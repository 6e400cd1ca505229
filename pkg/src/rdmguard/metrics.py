"""Detection and model-quality metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import ShapeError


@dataclass(frozen=True)
class DetectionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    fpr: float
    fnr: float
    f1: float

    def to_dict(self) -> dict:
        return asdict(self)


def detection_metrics(dec, truth) -> DetectionMetrics:
    """Confusion counts with malicious (1) as the positive class.

    F1 is 2TP / (2TP + FP + FN); when there is nothing to find and nothing
    was flagged it is defined as 1.
    """
    d = np.asarray(dec).astype(bool)
    t = np.asarray(truth).astype(bool)
    if d.shape != t.shape:
        raise ValueError(f"decision vector of length {d.size} vs truth of length {t.size}")
    tp = int(np.sum(d & t))
    fp = int(np.sum(d & ~t))
    tn = int(np.sum(~d & ~t))
    fn = int(np.sum(~d & t))
    fpr = fp / (fp + tn) if fp + tn else 0.0
    fnr = fn / (fn + tp) if fn + tp else 0.0
    denom = 2 * tp + fp + fn
    f1 = 2 * tp / denom if denom else 1.0
    return DetectionMetrics(tp, fp, tn, fn, fpr, fnr, f1)


def _check_nonempty(data: LabeledDataset, what: str) -> None:
    if len(data) == 0:
        raise ValueError(f"{what} is empty")


def accuracy(model: nn.MlpModel, test: LabeledDataset) -> float:
    _check_nonempty(test, "test set")
    if test.dim != model.input_dim:
        raise ShapeError("test features do not match the model input")
    return float(np.mean(nn.predict(model, test.features) == test.labels))


def attack_success_rate(model: nn.MlpModel, backdoor_set: LabeledDataset, target_label: int) -> float:
    """Fraction of triggered samples classified as ``target_label``."""
    _check_nonempty(backdoor_set, "backdoor set")
    return float(np.mean(nn.predict(model, backdoor_set.features) == target_label))
