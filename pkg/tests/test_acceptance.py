"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (see ``conftest.py``) before asserting,
so the summary at the end of the run lists every criterion.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

import oracles
from rdmguard import nn
from rdmguard import data as D
from rdmguard.cli import main
from rdmguard.detector import DetectorConfig
from rdmguard.experiment import (
    DistributionSpec, ExperimentConfig, build_clients, load_task, run_experiment, timing_scan,
)
from rdmguard.fl import EvalSets, RoundPlan, run_rounds
from rdmguard.outlier import lof_all
from rdmguard.representation import (
    Rdm, client_distance_matrix, cosine_distance, extract_rdm, flatten_upper, pearson_distance,
    rdm_from_outputs, sample_stimuli, write_matrix_csv,
)

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2, 3, 4)
RATIOS = (0.1, 0.2, 0.3, 0.4)


def sym_uniform(rng, L):
    a = rng.uniform(0, 2, size=(L, L))
    a = (a + a.T) / 2
    np.fill_diagonal(a, 0.0)
    return a


# -- math core --

def test_lof_matches_brute_force(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        L = int(rng.integers(5, 21))
        m = sym_uniform(rng, L)
        k = L // 2
        fast = lof_all(m, k).scores
        rows = m.tolist()
        slow = np.array([oracles.lof(rows, p, k) for p in range(L)])
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    took = time.perf_counter() - t0
    ok = criterion(1, worst <= 1e-9 and took < 30, f"max |diff| {worst:.2e} over 1000 matrices, {took:.1f}s")
    assert ok


def _oracle_reach_table(rows, k):
    L = len(rows)
    return [[oracles.reach(rows, i, j, k) if i != j else None for j in range(L)] for i in range(L)]


def _oracle_bounds(rows, p, k):
    nb = oracles.neighbours(rows, p, k)
    own = [oracles.reach(rows, p, o, k) for o in nb]
    second = [oracles.reach(rows, o, q, k) for o in nb for q in oracles.neighbours(rows, o, k)]
    return min(own) / max(second), max(own) / min(second)


def test_lof_bound_suites(criterion):
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    dense_bad = general_bad = 0
    max_eps = 0.0
    for _ in range(100):
        L = int(rng.integers(5, 21))
        m = 1.0 + rng.uniform(0, 0.3) * rng.uniform(size=(L, L))
        m = (m + m.T) / 2
        np.fill_diagonal(m, 0)
        k = L // 2
        rows = m.tolist()
        table = _oracle_reach_table(rows, k)
        vals = [v for r in table for v in r if v is not None]
        eps = max(vals) / min(vals) - 1
        max_eps = max(max_eps, eps)
        s = lof_all(m, k).scores
        dense_bad += int(np.sum((s < 1 / (1 + eps) - 1e-9) | (s > 1 + eps + 1e-9)))
    for _ in range(100):
        L = int(rng.integers(5, 21))
        m = sym_uniform(rng, L)
        k = L // 2
        rows = m.tolist()
        s = lof_all(m, k).scores
        for p in range(L):
            lo, hi = _oracle_bounds(rows, p, k)
            general_bad += int(not (lo - 1e-9 <= s[p] <= hi + 1e-9))
    took = time.perf_counter() - t0
    ok = criterion(2, dense_bad == 0 and general_bad == 0 and max_eps <= 0.3 and took < 10,
                   f"dense violations {dense_bad} (eps <= {max_eps:.3f}), general violations {general_bad}, {took:.1f}s")
    assert ok


def test_pearson_and_cosine_examples(criterion):
    exact, approx = [], []
    exact.append(abs(cosine_distance([1, 0], [1, 0]) - 0.0))
    exact.append(abs(cosine_distance([1, 0], [0, 1]) - 1.0))
    exact.append(abs(cosine_distance([1, 2], [2, 1]) - 0.2))
    x = np.array([0.3, 1.7, 2.2, 5.0, 4.1])
    exact.append(abs(pearson_distance(x, x)))
    exact.append(abs(pearson_distance(x, 3.5 * x - 2.0)))
    exact.append(abs(pearson_distance([1, 2, 4], [1, 3, 5]) - (1 - 3 * math.sqrt(21) / 14)))
    approx.append(abs(pearson_distance([1, 2, 4], [1, 3, 5]) - 0.01802))
    # extract_rdm and flatten_upper
    stim = sample_stimuli(D.synth_blobs(3, 4, 5, 0.2, 0), 4, 0)
    exact.append(float(np.max(np.abs(extract_rdm(nn.zeros_model([5, 4, 3]), stim).mat))))
    model = nn.init_model([5, 4, 3], 1)
    exact.append(float(np.max(np.abs(np.diag(extract_rdm(model, stim).mat)))))
    exact.append(abs(rdm_from_outputs(np.array([[1.0, 0.0], [0.0, 1.0]])).mat[0, 1] - 1.0))
    a, b, c = 0.1, 0.4, 0.7
    tri = Rdm(np.array([[0, a, b], [a, 0, c], [b, c, 0]]))
    exact.append(float(np.max(np.abs(flatten_upper(tri) - [a, b, c]))))
    exact.append(abs(flatten_upper(np.zeros((1000, 1000))).size - 499500))
    exact.append(float(np.max(np.abs(flatten_upper(np.zeros((6, 6)))))))
    # client distance matrix
    rng = np.random.default_rng(5)
    rdms = [rdm_from_outputs(rng.uniform(size=(6, 3))) for _ in range(3)]
    exact.append(float(np.max(np.abs(client_distance_matrix([rdms[0]] * 4).mat))))
    cdm = client_distance_matrix(rdms).mat
    for i in range(3):
        for j in range(3):
            want = 0.0 if i == j else pearson_distance(flatten_upper(rdms[i]), flatten_upper(rdms[j]))
            exact.append(abs(cdm[i, j] - want))
    ok = criterion(3, max(exact) <= 1e-12 and max(approx) <= 1e-6,
                   f"{len(exact)} exact cases max err {max(exact):.1e}, {len(approx)} decimal case err {max(approx):.1e}")
    assert ok


def test_gradient_check(criterion):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed + 100)
        dims = [int(d) for d in rng.integers(2, 9, size=int(rng.integers(2, 5)))]
        model = nn.init_model(dims, seed)
        x = rng.normal(size=(int(rng.integers(1, 7)), dims[0]))
        y = rng.integers(0, dims[-1], size=x.shape[0])
        _, analytic = nn.loss_and_gradients(model, x, y)

        def loss(p):
            return nn.cross_entropy(nn.forward(model.with_params(np.array(p)), x), y)

        numeric = np.array(oracles.numeric_gradient(loss, model.params().tolist()))
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(err))
    ok = criterion(4, worst < 1e-4, f"max relative error {worst:.2e} over 20 models")
    assert ok


# -- desk-scale experiments --

@pytest.fixture(scope="module")
def detection_sweep():
    t0 = time.perf_counter()
    out = {}
    for dist in ("iid", "dirichlet"):
        for ratio in (0.0, *RATIOS):
            cfg = ExperimentConfig(attacker_ratio=ratio, distribution=DistributionSpec(dist),
                                   detector=DetectorConfig(mode="refined"), seeds=SEEDS)
            out[dist, ratio] = run_experiment(cfg)
    return out, time.perf_counter() - t0


def test_desk_detection(criterion, detection_sweep):
    runs, took = detection_sweep
    f1 = {d: float(np.mean([runs[d, r]["summary"]["detection"]["f1"] for r in RATIOS])) for d in ("iid", "dirichlet")}
    fpr0 = {d: runs[d, 0.0]["summary"]["detection"]["fpr"] for d in ("iid", "dirichlet")}
    ok = f1["iid"] >= 0.90 and f1["dirichlet"] >= 0.85 and max(fpr0.values()) <= 0.10 and took < 600
    ok = criterion(5, ok, f"F1 iid {f1['iid']:.3f} dirichlet {f1['dirichlet']:.3f}; FPR at 0% "
                          f"iid {fpr0['iid']:.3f} dirichlet {fpr0['dirichlet']:.3f}; {took:.0f}s")
    assert ok


def test_false_alarm_guard(criterion, detection_sweep):
    runs, _ = detection_sweep
    quiet = runs["iid", 0.0]["summary"]["quiet_round_fraction"]
    other = runs["dirichlet", 0.0]["summary"]["quiet_round_fraction"]
    ok = criterion(10, quiet >= 0.9, f"rounds with no flags at 0%: {quiet:.3f} (dirichlet {other:.3f})")
    assert ok


def test_desk_defense(criterion):
    t0 = time.perf_counter()
    plan = RoundPlan(20, frozenset(range(10, 20)), mode="continuous")
    attacked = ExperimentConfig(attacker_ratio=0.4, plan=plan, detector=None, seeds=SEEDS)
    undefended = run_experiment(attacked)["summary"]
    defended = run_experiment(replace(attacked, detector=DetectorConfig()))["summary"]
    clean = run_experiment(replace(attacked, attacker_ratio=0.0))["summary"]
    took = time.perf_counter() - t0
    gap = abs(defended["final_accuracy"] - clean["final_accuracy"])
    ok = (undefended["final_asr"] >= 0.5 and defended["final_asr"] <= 0.10 and gap <= 0.03 and took < 900)
    ok = criterion(6, ok, f"ASR undefended {undefended['final_asr']:.3f} defended {defended['final_asr']:.3f}; "
                          f"acc defended {defended['final_accuracy']:.3f} vs attack-free {clean['final_accuracy']:.3f}; "
                          f"{took:.0f}s")
    assert ok


def test_oracle_exclusion_is_bitwise(criterion):
    checked = 0
    same = True
    for dist in ("iid", "dirichlet"):
        cfg = ExperimentConfig(attacker_ratio=0.4, distribution=DistributionSpec(dist))
        seed = 3
        train, test = load_task(cfg.dataset, seed)
        clients = build_clients(cfg, train, seed)
        trig = D.corner_trigger(train.dim, cfg.poison.trigger_size, cfg.poison.trigger_value, cfg.poison.target_label)
        evals = EvalSets(test, D.make_backdoor_testset(test, trig), cfg.poison.target_label)
        tc = replace(cfg.train, seed=seed)
        defended = run_rounds(clients, cfg.plan, tc, DetectorConfig(mode="oracle"), evals, seed, hidden=cfg.hidden)
        honest = [c for c in clients if not c.malicious]
        absent = run_rounds(honest, cfg.plan, tc, None, evals, seed, hidden=cfg.hidden)
        for a, b in zip(defended, absent):
            same &= a.global_model.same_weights(b.global_model)
            checked += 1
    ok = criterion(7, same, f"{checked} global models compared bitwise")
    assert ok


def _tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_cli_determinism(criterion, tmp_path):
    cfg = {"attacker_ratio": 0.2, "plan": {"total_rounds": 12, "attack_rounds": [10]}, "seeds": [0, 1]}
    cpath = tmp_path / "cfg.json"
    cpath.write_text(json.dumps(cfg))
    rng = np.random.default_rng(9)
    mats = []
    for i in range(2):
        m = sym_uniform(rng, 10)
        write_matrix_csv(m, tmp_path / f"m{i}.csv")
        mats.append(str(tmp_path / f"m{i}.csv"))
    calls = {
        "simulate": ["simulate", str(cpath)],
        "simulate-basic": ["simulate", str(cpath), "--mode", "basic", "--seed", "4"],
        "detect": ["detect", mats[0], "--epsilon-d", "0.2"],
        "calibrate": ["calibrate", *mats],
    }
    identical = True
    codes = []
    for name, argv in calls.items():
        trees = []
        for rep in ("a", "b"):
            out = tmp_path / rep / name
            codes.append(main([*argv, "--out-dir", str(out)]))
            trees.append(_tree(out))
        identical &= trees[0] == trees[1] and bool(trees[0])
    ok = criterion(8, identical and set(codes) == {0},
                   f"{len(calls)} invocations repeated, outputs identical: {identical}")
    assert ok


def test_complexity_scan(criterion):
    rows = {(r["clients"], r["per_class"]): r["seconds"] for r in timing_scan([10, 20], [20, 40], repeats=15)}
    b_ratios = [rows[n, 40] / rows[n, 20] for n in (10, 20)]
    n_ratios = [rows[20, b] / rows[10, b] for b in (20, 40)]
    desk = rows[10, 20]
    ok = all(3 <= r <= 5 for r in b_ratios) and all(3 <= r <= 6 for r in n_ratios) and desk < 5
    ok = criterion(9, ok, "2x b ratios " + ", ".join(f"{r:.2f}" for r in b_ratios)
                   + "; 2x N ratios " + ", ".join(f"{r:.2f}" for r in n_ratios) + f"; desk round {desk * 1000:.1f} ms")
    assert ok
