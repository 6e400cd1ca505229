"""Federated round loop with optional detection-based exclusion."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import nn
from .data import LabeledDataset
from .detector import DetectionTrace, DetectorConfig, calibrate_epsilon_d, detect
from .errors import AggregationError, ShapeError, TooFewClientsError
from .metrics import accuracy, attack_success_rate
from .representation import model_distance_matrix, sample_stimuli

log = logging.getLogger(__name__)

ATTACK_MODES = ("replacement", "continuous")


def derive_seed(*keys: int) -> int:
    """Independent 63-bit seed for a tuple of integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True, eq=False)
class ClientState:
    """One participant. ``data`` is already poisoned for a malicious client;
    ``clean_data`` is what it trains on outside attack rounds."""

    id: int
    data: LabeledDataset
    malicious: bool = False
    epochs: int | None = None
    boost: float | None = None
    stealth_lambda: float | None = None
    clean_data: LabeledDataset | None = None

    def __post_init__(self):
        if not self.malicious and (self.boost is not None or self.stealth_lambda is not None):
            raise ValueError("boost and stealth_lambda are only meaningful for malicious clients")
        if self.boost is not None and self.boost < 1:
            raise ValueError("boost must be >= 1")
        if self.stealth_lambda is not None and self.stealth_lambda < 0:
            raise ValueError("stealth_lambda must be >= 0")

    @property
    def size(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class RoundPlan:
    total_rounds: int
    attack_rounds: frozenset[int] = frozenset()
    mode: str = "replacement"
    defense_enabled_from: int = 0
    extra_attack_epochs: int = 5

    def __post_init__(self):
        object.__setattr__(self, "attack_rounds", frozenset(int(r) for r in self.attack_rounds))
        if self.mode not in ATTACK_MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if any(r < 0 or r >= self.total_rounds for r in self.attack_rounds):
            raise ValueError("attack rounds must lie in [0, total_rounds)")
        if self.mode == "replacement" and len(self.attack_rounds) > 1:
            raise ValueError("model replacement attacks in exactly one round")

    def default_boost(self, clients: int) -> float:
        return float(clients) if self.mode == "replacement" else 1.0


@dataclass(frozen=True, eq=False)
class EvalSets:
    test: LabeledDataset
    backdoor: LabeledDataset | None = None
    target_label: int = 1


@dataclass(eq=False)
class RoundRecord:
    round: int
    global_model: nn.MlpModel
    decisions: np.ndarray
    truth: np.ndarray
    accuracy: float
    asr: float
    detect_time: float = 0.0
    defended: bool = False
    aggregated: bool = True
    epsilon_d: float | None = None
    distance: np.ndarray | None = None
    trace: dict | None = field(default=None, repr=False)


def local_update(global_model: nn.MlpModel, client: ClientState, cfg: nn.TrainConfig, round: int,
                 plan: RoundPlan, prev_benign_mean_update: np.ndarray | None = None) -> nn.MlpModel:
    """The model ``client`` submits after training from ``global_model``."""
    epochs = cfg.epochs if client.epochs is None else client.epochs
    attacking = client.malicious and round in plan.attack_rounds
    if not attacking:
        data = client.clean_data if client.clean_data is not None else client.data
        return nn.train_local(global_model, data, cfg, epochs=epochs)

    anchor = None
    weight = 0.0
    if client.stealth_lambda:
        if prev_benign_mean_update is None:
            log.info("client %d: no benign reference update yet, training without the stealth term", client.id)
        else:
            anchor = global_model.params() + prev_benign_mean_update
            weight = client.stealth_lambda
    trained = nn.train_local(global_model, client.data, cfg, epochs=epochs + plan.extra_attack_epochs,
                             anchor=anchor, anchor_weight=weight)
    if client.boost is None or client.boost == 1:
        return trained
    base = global_model.params()
    return trained.with_params(base + client.boost * (trained.params() - base))


def fedavg(updates: Sequence[tuple[nn.MlpModel, int]], decisions=None) -> nn.MlpModel:
    """Sample-size weighted average of the models not flagged in ``decisions``.

    ``decisions[i] == 1`` excludes update ``i`` entirely; weights are
    renormalised over the included clients only.
    """
    if not updates:
        raise AggregationError("no updates to aggregate")
    flags = np.zeros(len(updates), dtype=bool) if decisions is None else np.asarray(decisions).astype(bool)
    if flags.shape != (len(updates),):
        raise ShapeError("decision vector length does not match the number of updates")
    included = [(m, n) for (m, n), f in zip(updates, flags) if not f]
    if not included:
        raise AggregationError("every client was excluded from aggregation")
    dims = included[0][0].layer_dims
    if any(m.layer_dims != dims for m, _ in included):
        raise ShapeError("updates have different architectures")
    total = sum(n for _, n in included)
    acc = np.zeros(included[0][0].n_params)
    for model, n in included:
        acc += (n / total) * model.params()
    return included[0][0].with_params(acc)


def _benign_mean_update(updates: Sequence[nn.MlpModel], clients: Sequence[ClientState], base: np.ndarray) -> np.ndarray | None:
    deltas = [m.params() - base for m, c in zip(updates, clients) if not c.malicious]
    if not deltas:
        return None
    return np.mean(deltas, axis=0)


def run_rounds(clients: Sequence[ClientState], plan: RoundPlan, train_cfg: nn.TrainConfig,
               detector_cfg: DetectorConfig | None, eval_sets: EvalSets, seed: int, *,
               init: nn.MlpModel | None = None, hidden: Sequence[int] = (32,),
               keep_matrices: bool = False, keep_traces: bool = False) -> list[RoundRecord]:
    """Run ``plan.total_rounds`` of broadcast, local training, detection and FedAvg.

    ``detector_cfg=None`` disables detection (plain FedAvg). With
    ``epsilon_d`` unset, the bound is the running maximum over the distance
    matrices of the calibration window, then frozen. Before the window
    there is no bound and refinement never triggers.
    """
    if len(clients) < 2:
        raise ValueError("need at least two clients")
    if len({c.id for c in clients}) != len(clients):
        raise ValueError("client ids must be unique")
    test = eval_sets.test
    global_model = init if init is not None else nn.init_model([test.dim, *hidden, test.class_count], derive_seed(seed, 0))
    truth = np.array([int(c.malicious) for c in clients], dtype=np.int64)

    stimuli = None
    history: list[np.ndarray] = []
    epsilon_d = None
    if detector_cfg is not None:
        epsilon_d = detector_cfg.epsilon_d
        if detector_cfg.mode != "oracle":
            stimuli = sample_stimuli(test, detector_cfg.per_class, derive_seed(seed, 1))
        if any(detector_cfg.calibrating(r) for r in plan.attack_rounds):
            log.warning("attack rounds overlap the epsilon_d calibration window")

    records: list[RoundRecord] = []
    prev_benign = None
    for t in range(plan.total_rounds):
        updates = []
        for c in clients:
            cfg_c = replace(train_cfg, seed=derive_seed(seed, 2, t, c.id))
            updates.append(local_update(global_model, c, cfg_c, t, plan, prev_benign))

        dec = np.zeros(len(clients), dtype=np.int64)
        defended = detector_cfg is not None and t >= plan.defense_enabled_from
        calibrating = detector_cfg is not None and detector_cfg.calibrating(t)
        dist = trace = None
        elapsed = 0.0
        if detector_cfg is not None and detector_cfg.mode == "oracle":
            if defended:
                dec = truth.copy()
        elif defended or calibrating:
            started = time.perf_counter()
            try:
                cdm = model_distance_matrix(updates, stimuli, detector_cfg.use_logits)
                dist = cdm.mat
                if calibrating:
                    history.append(dist)
                    epsilon_d = calibrate_epsilon_d(history)
                if defended:
                    tr = DetectionTrace() if keep_traces else None
                    dec = detect(dist, replace(detector_cfg, epsilon_d=epsilon_d), tr)
                    dec[list(cdm.degenerate)] = 1
                    trace = tr.to_dict() if tr is not None else None
            except (ValueError, FloatingPointError, TooFewClientsError) as exc:
                log.warning("round %d: detection failed (%s); aggregating every client", t, exc)
                dec = np.zeros(len(clients), dtype=np.int64)
            elapsed = time.perf_counter() - started

        prev_benign = _benign_mean_update(updates, clients, global_model.params())
        aggregated = True
        try:
            global_model = fedavg([(m, c.size) for m, c in zip(updates, clients)], dec)
        except AggregationError as exc:
            log.warning("round %d: %s; keeping the previous global model", t, exc)
            aggregated = False

        acc = accuracy(global_model, test)
        asr = 0.0
        if eval_sets.backdoor is not None and len(eval_sets.backdoor):
            asr = attack_success_rate(global_model, eval_sets.backdoor, eval_sets.target_label)
        records.append(RoundRecord(
            round=t, global_model=global_model, decisions=dec, truth=truth, accuracy=acc, asr=asr,
            detect_time=elapsed, defended=defended, aggregated=aggregated, epsilon_d=epsilon_d,
            distance=dist if keep_matrices else None, trace=trace,
        ))
        log.debug("round %d acc=%.4f asr=%.4f flagged=%s", t, acc, asr, dec.tolist())
    return records


ROUND_CSV_HEADER = ["round", "accuracy", "asr", "detect_time_s", "decisions"]


def write_round_csv(records: Sequence[RoundRecord], path, record_timing: bool = False) -> None:
    """Round records as CSV. Wall-clock times are written only on request,
    so that repeated runs produce identical files."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUND_CSV_HEADER)
        for r in records:
            writer.writerow([
                r.round, repr(r.accuracy), repr(r.asr),
                repr(r.detect_time) if record_timing else "0.0",
                "".join(str(int(d)) for d in r.decisions),
            ])


def read_round_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "round": int(r["round"]),
            "accuracy": float(r["accuracy"]),
            "asr": float(r["asr"]),
            "detect_time_s": float(r["detect_time_s"]),
            "decisions": [int(ch) for ch in r["decisions"]],
        }
        for r in rows
    ]
