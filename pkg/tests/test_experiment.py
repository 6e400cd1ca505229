import csv
import json
import logging

import numpy as np
import pytest

from rdmguard.detector import DetectorConfig
from rdmguard.errors import ConfigError
from rdmguard.experiment import (
    DatasetSpec, ExperimentConfig, build_clients, config_from_dict, config_to_dict, load_config,
    load_task, read_report, run_experiment, timing_scan,
)
from rdmguard.fl import RoundPlan


def small(**kw):
    base = dict(
        dataset=DatasetSpec(class_count=3, per_class=50, dim=16, spread=0.2, test_per_class=10),
        clients=5,
        plan=RoundPlan(4, frozenset({2})),
        hidden=(8,),
        detector=DetectorConfig(epsilon_d=0.5, per_class=5),
        seeds=(0, 1),
    )
    base.update(kw)
    return ExperimentConfig(**base)


SMALL_JSON = {
    "dataset": {"class_count": 3, "per_class": 50, "dim": 16, "spread": 0.2, "test_per_class": 10},
    "clients": 5,
    "attacker_ratio": 0.2,
    "plan": {"total_rounds": 4, "attack_rounds": [2]},
    "hidden": [8],
    "detector": {"epsilon_d": 0.5, "per_class": 5},
    "seeds": [0, 1],
}


def test_attacker_count_rounds_half_up():
    assert small(attacker_ratio=0.2).attacker_count == 1
    assert small(attacker_ratio=0.3).attacker_count == 2  # 1.5 rounds up
    assert small(clients=10, attacker_ratio=0.4).attacker_count == 4


def test_benign_majority_enforced(caplog):
    with pytest.raises(ConfigError):
        small(attacker_ratio=0.5)
    with caplog.at_level(logging.WARNING):
        cfg = small(attacker_ratio=0.5, allow_attacker_majority=True)
    assert cfg.attacker_count == 3
    assert "benign majority" in caplog.text


def test_config_validation():
    for bad in (dict(clients=1), dict(attacker_ratio=-0.1), dict(seeds=())):
        with pytest.raises(ConfigError):
            small(**bad)
    with pytest.raises(ConfigError):
        ExperimentConfig(distribution=type(ExperimentConfig().distribution)("zipf"))


def test_config_dict_round_trip():
    cfg = config_from_dict(SMALL_JSON)
    assert cfg.plan.attack_rounds == frozenset({2})
    assert cfg.attacker_count == 1
    again = config_from_dict(json.loads(json.dumps(config_to_dict(cfg))))
    assert again == cfg


@pytest.mark.parametrize("patch", [
    {"bogus": 1},
    {"dataset": {"classes": 3}},
    {"train": {"learning_rate": -1}},
    {"plan": {"total_rounds": 4, "attack_rounds": [9]}},
    {"detector": {"delta": "high"}},
    {"plan": 3},
])
def test_config_errors(patch):
    with pytest.raises(ConfigError):
        config_from_dict({**SMALL_JSON, **patch})


def test_load_config_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    p.write_text(json.dumps(SMALL_JSON))
    assert load_config(p).clients == 5


def test_unknown_dataset_kind():
    with pytest.raises(ConfigError):
        load_task(DatasetSpec(kind="cifar"), 0)
    with pytest.raises(ConfigError):
        load_task(DatasetSpec(kind="idx"), 0)


def test_build_clients_marks_and_poisons_attackers():
    cfg = small(attacker_ratio=0.4)
    train, _ = load_task(cfg.dataset, 0)
    clients = build_clients(cfg, train, 0)
    bad = [c for c in clients if c.malicious]
    assert len(bad) == 2
    for c in bad:
        assert c.boost == cfg.clients  # replacement default
        assert not c.data.equals(c.clean_data)
        assert len(c.data) == len(c.clean_data)
    assert sum(len(c.data) for c in clients) == len(train)


def test_report_round_trip_and_files(tmp_path):
    cfg = small(attacker_ratio=0.2)
    rep = run_experiment(cfg, tmp_path)
    assert read_report(tmp_path / "report.json") == rep
    for s in cfg.seeds:
        rows = list(csv.DictReader(open(tmp_path / f"rounds_seed{s}.csv")))
        assert [int(r["round"]) for r in rows] == list(range(4))
        for r in rows:
            assert 0 <= float(r["accuracy"]) <= 1 and 0 <= float(r["asr"]) <= 1
            assert set(r["decisions"]) <= {"0", "1"} and len(r["decisions"]) == 5
    s = rep["summary"]
    assert set(s) >= {"final_accuracy", "final_asr", "detection", "quiet_round_fraction"}


def test_reruns_are_byte_identical(tmp_path):
    cfg = small(attacker_ratio=0.2)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("report.json", "rounds_seed0.csv", "rounds_seed1.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_partial_results_flushed(tmp_path, monkeypatch):
    import rdmguard.experiment as E

    real = E.simulate_seed

    def flaky(cfg, seed, **kw):
        if seed == 1:
            raise RuntimeError("boom")
        return real(cfg, seed, **kw)

    monkeypatch.setattr(E, "simulate_seed", flaky)
    with pytest.raises(RuntimeError):
        run_experiment(small(), tmp_path)
    rep = read_report(tmp_path / "report.json")
    assert list(rep["seeds"]) == ["0"]
    assert "boom" in rep["error"]
    assert (tmp_path / "rounds_seed0.csv").exists()


def test_undefended_run_has_no_detection_block():
    rep = run_experiment(small(detector=None, seeds=(0,)))
    assert "detection" not in rep["summary"]
    assert rep["seeds"]["0"]["quiet_round_fraction"] is None


def test_timing_single_point(tmp_path):
    out = tmp_path / "t.csv"
    rows = timing_scan([5], [4], class_count=3, dim=8, hidden=4, repeats=1, out_path=out)
    assert len(rows) == 1 and rows[0]["stimuli"] == 12
    lines = out.read_text().splitlines()
    assert lines[0] == "clients,per_class,stimuli,seconds"
    assert len(lines) == 2
    assert float(lines[1].split(",")[3]) > 0
