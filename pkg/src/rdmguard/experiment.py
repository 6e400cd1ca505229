"""End-to-end experiment runner, reports and the detection timing scan."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from . import nn
from .detector import DetectorConfig, detect
from .errors import ConfigError
from .fl import ClientState, EvalSets, RoundPlan, RoundRecord, derive_seed, run_rounds, write_round_csv
from .metrics import DetectionMetrics, detection_metrics
from .representation import model_distance_matrix, sample_stimuli

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetSpec:
    """``kind`` is ``synth_blobs`` or ``idx``. For ``idx`` the four paths
    point at MNIST-format files and the generator fields are ignored."""

    kind: str = "synth_blobs"
    class_count: int = 10
    per_class: int = 600
    dim: int = 64
    spread: float = 0.3
    test_per_class: int = 100
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass(frozen=True)
class DistributionSpec:
    kind: str = "iid"
    alpha: float = 0.9


@dataclass(frozen=True)
class PoisonSpec:
    kind: str = "backdoor_trigger"
    attack_rate: float = 0.2
    target_label: int = 1
    trigger_size: int = 3
    trigger_value: float = 1.0
    flip_source: int | None = None
    flip_target: int | None = None


@dataclass(frozen=True)
class AttackerSpec:
    """``boost=None`` picks N for replacement and 1 for continuous attacks."""

    boost: float | None = None
    stealth_lambda: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    clients: int = 10
    attacker_ratio: float = 0.0
    allow_attacker_majority: bool = False
    distribution: DistributionSpec = field(default_factory=DistributionSpec)
    poison: PoisonSpec = field(default_factory=PoisonSpec)
    attacker: AttackerSpec = field(default_factory=AttackerSpec)
    plan: RoundPlan = field(default_factory=lambda: RoundPlan(20, frozenset({10})))
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    hidden: tuple[int, ...] = (32,)
    detector: DetectorConfig | None = field(default_factory=DetectorConfig)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.clients < 2:
            raise ConfigError("need at least two clients")
        if not 0.0 <= self.attacker_ratio <= 1.0:
            raise ConfigError("attacker_ratio must lie in [0, 1]")
        if self.distribution.kind not in ("iid", "dirichlet"):
            raise ConfigError(f"unknown distribution {self.distribution.kind!r}")
        if self.distribution.kind == "dirichlet" and not self.distribution.alpha > 0:
            raise ConfigError("dirichlet alpha must be positive")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        limit = math.ceil(self.clients / 2)
        if self.attacker_count >= limit:
            if not self.allow_attacker_majority:
                raise ConfigError(f"{self.attacker_count} attackers of {self.clients} clients breaks the "
                                  "benign-majority assumption; set allow_attacker_majority to run anyway")
            log.warning("%d attackers of %d clients: benign majority not guaranteed", self.attacker_count, self.clients)

    @property
    def attacker_count(self) -> int:
        return int(math.floor(self.attacker_ratio * self.clients + 0.5))


_SECTIONS = {
    "dataset": DatasetSpec,
    "distribution": DistributionSpec,
    "poison": PoisonSpec,
    "attacker": AttackerSpec,
    "train": nn.TrainConfig,
}


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {sorted(extra)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    extra = set(obj) - known
    if extra:
        raise ConfigError(f"unknown top-level field(s) {sorted(extra)}")
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in obj:
            kw[name] = _build(cls, obj[name], name)
    if "plan" in obj:
        plan = dict(obj["plan"]) if isinstance(obj["plan"], dict) else obj["plan"]
        if isinstance(plan, dict) and "attack_rounds" in plan:
            plan["attack_rounds"] = frozenset(plan["attack_rounds"])
        kw["plan"] = _build(RoundPlan, plan, "plan")
    if "detector" in obj:
        kw["detector"] = None if obj["detector"] is None else _build(DetectorConfig, obj["detector"], "detector")
    for name in ("clients", "attacker_ratio", "allow_attacker_majority"):
        if name in obj:
            kw[name] = obj[name]
    if "hidden" in obj:
        kw["hidden"] = tuple(int(h) for h in obj["hidden"])
    if "seeds" in obj:
        kw["seeds"] = tuple(int(s) for s in obj["seeds"])
    try:
        return ExperimentConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = asdict(cfg)
    out["plan"]["attack_rounds"] = sorted(cfg.plan.attack_rounds)
    out["hidden"] = list(cfg.hidden)
    out["seeds"] = list(cfg.seeds)
    return out


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(obj)


def load_task(spec: DatasetSpec, seed: int) -> tuple[D.LabeledDataset, D.LabeledDataset]:
    if spec.kind == "synth_blobs":
        full = D.synth_blobs(spec.class_count, spec.per_class, spec.dim, spec.spread, derive_seed(seed, 10))
        return D.train_test_split(full, spec.test_per_class, derive_seed(seed, 11))
    if spec.kind == "idx":
        paths = (spec.train_images, spec.train_labels, spec.test_images, spec.test_labels)
        if any(p is None for p in paths):
            raise ConfigError("idx datasets need train/test image and label paths")
        train = D.load_idx(spec.train_images, spec.train_labels, spec.class_count)
        test = D.load_idx(spec.test_images, spec.test_labels, spec.class_count)
        return train, test
    raise ConfigError(f"unknown dataset kind {spec.kind!r}")


def _poison_config(spec: PoisonSpec, dim: int) -> tuple[D.PoisonConfig, D.TriggerSpec | None]:
    if spec.kind == "backdoor_trigger":
        trig = D.corner_trigger(dim, spec.trigger_size, spec.trigger_value, spec.target_label)
        return D.PoisonConfig("backdoor_trigger", spec.attack_rate, trigger=trig), trig
    if spec.kind == "label_flip":
        return D.PoisonConfig("label_flip", spec.attack_rate, flip_source=spec.flip_source,
                              flip_target=spec.flip_target), None
    if spec.kind == "none":
        return D.PoisonConfig("none"), None
    raise ConfigError(f"poison kind {spec.kind!r} is not supported by the runner")


def build_clients(cfg: ExperimentConfig, train: D.LabeledDataset, seed: int) -> list[ClientState]:
    if cfg.distribution.kind == "iid":
        part = D.partition_iid(train, cfg.clients, derive_seed(seed, 12))
    else:
        part = D.partition_dirichlet(train, cfg.clients, cfg.distribution.alpha, derive_seed(seed, 12))
    rng = np.random.default_rng(derive_seed(seed, 13))
    attackers = set(int(i) for i in rng.choice(cfg.clients, size=cfg.attacker_count, replace=False))
    poison, _ = _poison_config(cfg.poison, train.dim)
    boost = cfg.attacker.boost if cfg.attacker.boost is not None else cfg.plan.default_boost(cfg.clients)
    clients = []
    for cid, idx in enumerate(part.assignments):
        shard = train.subset(idx)
        if cid in attackers:
            bad = D.apply_poison(shard, poison, derive_seed(seed, 14, cid))
            clients.append(ClientState(cid, bad, True, boost=boost,
                                       stealth_lambda=cfg.attacker.stealth_lambda, clean_data=shard))
        else:
            clients.append(ClientState(cid, shard))
    return clients


def simulate_seed(cfg: ExperimentConfig, seed: int, **kw) -> list[RoundRecord]:
    train, test = load_task(cfg.dataset, seed)
    clients = build_clients(cfg, train, seed)
    _, trig = _poison_config(cfg.poison, train.dim)
    backdoor = D.make_backdoor_testset(test, trig) if trig is not None else None
    evals = EvalSets(test, backdoor, cfg.poison.target_label)
    train_cfg = nn.TrainConfig(cfg.train.learning_rate, cfg.train.epochs, cfg.train.batch_size, seed)
    return run_rounds(clients, cfg.plan, train_cfg, cfg.detector, evals, seed, hidden=cfg.hidden, **kw)


def _mean_metrics(items: Sequence[DetectionMetrics]) -> dict:
    if not items:
        return {}
    out = {k: int(sum(getattr(m, k) for m in items)) for k in ("tp", "fp", "tn", "fn")}
    for k in ("fpr", "fnr", "f1"):
        out[k] = float(np.mean([getattr(m, k) for m in items]))
    return out


def summarize_seed(records: Sequence[RoundRecord], plan: RoundPlan) -> dict:
    """Detection metrics averaged over attack rounds, plus final Acc/ASR."""
    attack = [detection_metrics(r.decisions, r.truth) for r in records if r.round in plan.attack_rounds and r.defended]
    defended = [r for r in records if r.defended]
    last = records[-1]
    return {
        "final_accuracy": last.accuracy,
        "final_asr": last.asr,
        "detection": _mean_metrics(attack),
        "quiet_round_fraction": float(np.mean([r.decisions.sum() == 0 for r in defended])) if defended else None,
        "epsilon_d": last.epsilon_d,
    }


def _aggregate(per_seed: dict) -> dict:
    rows = list(per_seed.values())
    out = {
        "final_accuracy": float(np.mean([r["final_accuracy"] for r in rows])),
        "final_asr": float(np.mean([r["final_asr"] for r in rows])),
    }
    dets = [r["detection"] for r in rows if r["detection"]]
    if dets:
        out["detection"] = {k: float(np.mean([d[k] for d in dets])) for k in ("fpr", "fnr", "f1")}
    quiet = [r["quiet_round_fraction"] for r in rows if r["quiet_round_fraction"] is not None]
    if quiet:
        out["quiet_round_fraction"] = float(np.mean(quiet))
    return out


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def run_experiment(cfg: ExperimentConfig, out_dir=None, record_timing: bool = False) -> dict:
    """Run every seed and return the report; with ``out_dir`` also write
    ``rounds_seed<s>.csv`` files and ``report.json``.

    Seeds that completed are written out even if a later seed fails.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = {"config": config_to_dict(cfg), "seeds": {}}
    try:
        for seed in cfg.seeds:
            records = simulate_seed(cfg, seed)
            report["seeds"][str(seed)] = summarize_seed(records, cfg.plan)
            if out is not None:
                write_round_csv(records, out / f"rounds_seed{seed}.csv", record_timing)
    except Exception as exc:
        report["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        if report["seeds"]:
            report["summary"] = _aggregate(report["seeds"])
        if out is not None:
            write_report(report, out / "report.json")
    return report


def _timing_models(n: int, class_count: int, dim: int, hidden: int, seed: int,
                   outlier_ratio: float = 0.4) -> list[nn.MlpModel]:
    """Small perturbations of one random model, except for
    ``round(outlier_ratio * n)`` clients that are drawn independently so the
    detector has work proportional to ``n``."""
    dims = [dim, hidden, class_count]
    base = nn.init_model(dims, derive_seed(seed, 20))
    outliers = int(math.floor(outlier_ratio * n + 0.5))
    models = []
    for i in range(n):
        if i < outliers:
            models.append(nn.init_model(dims, derive_seed(seed, 20, i)))
        else:
            rng = np.random.default_rng(derive_seed(seed, 22, i))
            p = base.params()
            models.append(base.with_params(p + 0.01 * np.abs(p).mean() * rng.standard_normal(p.size)))
    return models


def _time_once(models: Sequence[nn.MlpModel], stimuli, cfg: DetectorConfig) -> float:
    t0 = time.perf_counter()
    cdm = model_distance_matrix(models, stimuli, cfg.use_logits)
    detect(cdm.mat, cfg)
    return time.perf_counter() - t0


def time_detection(models: Sequence[nn.MlpModel], test: D.LabeledDataset, per_class: int, seed: int = 0,
                   repeats: int = 3, cfg: DetectorConfig | None = None) -> float:
    """Smallest wall time over ``repeats`` of stimuli probing, RDM and
    client-distance construction and detection."""
    cfg = cfg or DetectorConfig(epsilon_d=np.inf)
    stimuli = sample_stimuli(test, per_class, seed)
    return min(_time_once(models, stimuli, cfg) for _ in range(repeats))


TIMING_HEADER = ["clients", "per_class", "stimuli", "seconds"]


def timing_scan(client_counts: Sequence[int], sample_sizes: Sequence[int], class_count: int = 10,
                dim: int = 64, hidden: int = 32, seed: int = 0, repeats: int = 3, out_path=None,
                outlier_ratio: float = 0.4) -> list[dict]:
    """Detection wall time for every (clients, per-class stimuli) pair on
    synthetic models, a fixed fraction of which are outliers."""
    test = D.synth_blobs(class_count, max(sample_sizes), dim, 0.3, derive_seed(seed, 21))
    cfg = DetectorConfig(epsilon_d=np.inf)
    grid = []
    for n in client_counts:
        models = _timing_models(n, class_count, dim, hidden, seed, outlier_ratio)
        for b in sample_sizes:
            grid.append((int(n), int(b), models, sample_stimuli(test, b, seed)))
    # Repeats sweep the whole grid so that a slow spell on a shared machine
    # hits every point alike; each point keeps its fastest run.
    best = [math.inf] * len(grid)
    for _ in range(repeats):
        for i, (_, _, models, stimuli) in enumerate(grid):
            best[i] = min(best[i], _time_once(models, stimuli, cfg))
    rows = [{"clients": n, "per_class": b, "stimuli": b * class_count, "seconds": sec}
            for (n, b, _, _), sec in zip(grid, best)]
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TIMING_HEADER)
            w.writeheader()
            for r in rows:
                w.writerow({**r, "seconds": repr(r["seconds"])})
    return rows
