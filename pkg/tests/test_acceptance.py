"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py``.
"""

import hashlib
import json
import sys
import tempfile
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from simprov import nn
from simprov.adapt import AdaptConfig, chance_distance, confidence, d_rand, majority_vote, simprov_adapt
from simprov.base import TrainConfig, irm_penalty_from_logits, train_erm
from simprov.cli import main as cli
from simprov.data import DomainDataset, DomainSpec, default_benchmark
from simprov.harness import read_metrics

RESULTS = []

# the protocol run: default benchmark, IRM base, ERM baseline, 5 trials
PROTOCOL = "n_trials: 5\nmaster_seed: 0\nbase_method: irm\nbaselines: [erm]\n"


def report(cid, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  C{cid} {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def workdir():
    with tempfile.TemporaryDirectory() as d:
        yield Path(d)


@pytest.fixture(scope="module")
def protocol_run(workdir):
    cfg = workdir / "protocol.yaml"
    cfg.write_text(PROTOCOL)
    t0 = time.perf_counter()
    code = cli(["run-experiment", "--config", str(cfg), "--out", str(workdir / "protocol")])
    elapsed = time.perf_counter() - t0
    return cfg, workdir / "protocol", code, elapsed


# -- 1 --------------------------------------------------------------------------


def finite_diff(model, X, y, mask, eps=1e-5):
    out = []
    for arr in model.weights + model.biases:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = nn.softmax_ce(nn.forward(model, X, mask), y)[0]
            arr[idx] = old - eps
            down = nn.softmax_ce(nn.forward(model, X, mask), y)[0]
            arr[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def test_c1_gradient_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    ok = True
    for case in range(20):
        sizes = tuple(int(v) for v in (rng.integers(2, 6), rng.integers(2, 7), rng.integers(2, 7), rng.integers(2, 4)))
        model = nn.init_mlp(sizes, seed=case, activation=("relu", "tanh")[case % 2], dropout_rate=0.3)
        model.biases = [rng.normal(size=b.shape) for b in model.biases]
        X = rng.normal(size=(8, sizes[0]))
        y = rng.integers(0, sizes[-1], size=8)
        mask = nn.sample_mask(model, 8, seed=100 + case)
        _, grads = nn.backward(model, X, y, mask)
        for a, n in zip(grads.weights + grads.biases, finite_diff(model, X, y, mask)):
            err = np.abs(a - n)
            ok &= bool(np.all(err <= 1e-4 * np.abs(n) + 1e-7))
            worst = max(worst, float(np.max(err / np.maximum(np.abs(n), 1e-3))))
    dt = time.perf_counter() - t0
    assert report(1, "gradient oracle", ok and dt < 10, f"20 cases, max scaled rel err {worst:.2e} (< 1e-4), {dt:.2f}s (< 10s)")


# -- 2 --------------------------------------------------------------------------


def test_c2_irm_penalty_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        n, k = int(rng.integers(1, 20)), int(rng.integers(2, 6))
        logits = rng.normal(scale=2.0, size=(n, k))
        y = rng.integers(0, k, size=n)
        h = 1e-5
        g = (nn.softmax_ce((1 + h) * logits, y)[0] - nn.softmax_ce((1 - h) * logits, y)[0]) / (2 * h)
        worst = max(worst, abs(irm_penalty_from_logits(logits, y)[0] - g * g))
    dt = time.perf_counter() - t0
    assert report(2, "IRM penalty oracle", worst <= 1e-6 and dt < 5, f"50 cases, max abs err {worst:.2e} (<= 1e-6), {dt:.2f}s (< 5s)")


# -- 3 --------------------------------------------------------------------------


def test_c3_vote_and_confidence_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    mismatches = ties = 0
    for _ in range(200):
        k = int(rng.integers(2, 5))
        votes = rng.integers(0, k, size=int(rng.integers(1, 10))).tolist()
        counts = Counter(votes)
        top = max(counts.values())
        ties += sum(v == top for v in counts.values()) > 1
        mismatches += majority_vote(votes, k) != min(c for c in range(k) if counts.get(c, 0) == top)
    analytic = [([0, 1, 0, 1], -0.25), ([0, 0, 0, 1], -0.1875), ([1, 1, 1, 1], 0.0), ([0], 0.0), ([2, 2, 2], 0.0)]
    bad_kappa = [v for v, want in analytic if confidence(v) != want]
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and ties > 0 and not bad_kappa and dt < 1
    assert report(3, "vote/confidence oracles", ok, f"200 vote sets ({ties} with ties), {mismatches} mismatches, analytic kappa mismatches {bad_kappa}, {dt:.3f}s (< 1s)")


# -- 4 --------------------------------------------------------------------------


def test_c4_d_rand_arithmetic():
    got = {acc: chance_distance(acc, 2) for acc in (0.5, 0.9, 0.1)}
    # the same through real models: a constant predictor on 10 labeled points
    model = nn.MlpModel([np.zeros((10, 2))], [np.array([0.0, 1.0])])
    via_model = {}
    for acc in (0.5, 0.9, 0.1):
        y = np.zeros(10, dtype=np.int64)
        y[: int(round(acc * 10))] = 1
        ds = DomainDataset(DomainSpec("e", n_samples=10), np.zeros((10, 10)), y)
        via_model[acc] = d_rand(model, [ds], 2)
    ok = got == {0.5: 0.0, 0.9: 0.4, 0.1: 0.4} and via_model == got
    assert report(4, "d_rand arithmetic", ok, f"formula {got}, via model {via_model} (exact)")


# -- 5 --------------------------------------------------------------------------


def test_c5_qualitative_ordering(protocol_run):
    _, out, code, elapsed = protocol_run
    summary = json.loads((out / "summary.json").read_text())
    erm = summary["baselines"]["erm"]["mean"]
    irm = summary["base"]["mean"]
    simprov = summary["simprov"]["mean"]
    trial_s = []
    for i in range(5):
        rows = [json.loads(l) for l in (out / f"trial_{i:03d}" / "timings.jsonl").read_text().splitlines()]
        trial_s.append(sum(v for r in rows for k, v in r.items() if k.endswith("ms")) / 1e3)
    ok = code == 0 and summary["n_ok"] == 5 and erm < 0.50 and irm > 0.55 and simprov >= irm + 0.05 and max(trial_s) < 60
    per = [round(t["final_acc"], 3) for t in summary["trials"]]
    assert report(
        5, "qualitative ordering", ok,
        f"ERM {erm:.3f} (< 0.50), IRM {irm:.3f} (> 0.55), Simprov-IRM {simprov:.3f} (>= {irm + 0.05:.3f}); "
        f"per-trial Simprov {per}; slowest trial {max(trial_s):.1f}s (< 60s)",
    )


# -- 6 --------------------------------------------------------------------------


def test_c6_gate_monotonicity():
    rng = np.random.default_rng(6)
    failures = []
    for case in range(20):
        seed = int(rng.integers(0, 10_000))
        bench = default_benchmark(seed, n_samples=int(rng.integers(60, 200)))
        base = train_erm(bench.train, TrainConfig(epochs=int(rng.integers(5, 40)), seed=seed))
        cfg = AdaptConfig(
            m=int(rng.integers(1, 8)),
            dropout=float(rng.choice([0.0, 0.1, 0.3, 0.5])),
            select_fraction=float(rng.choice([0.25, 0.5, 1.0])),
            deepness=int(rng.integers(1, 6)),
            patience=int(rng.integers(1, 4)),
            student=TrainConfig(epochs=int(rng.integers(0, 10)), lr=float(rng.choice([3e-3, 1e-2]))),
            seed=seed,
        )
        final, state = simprov_adapt(base, bench.train, bench.target.X, cfg)
        best = [r.d_rand for r in state.history if r.accepted]
        strictly = all(b > a for a, b in zip(best, best[1:]))
        recorded = d_rand(final, bench.train)
        if not (strictly and recorded == max(best) == state.best_d_rand == max(r.d_rand for r in state.history)):
            failures.append(case)
    assert report(6, "gate monotonicity", not failures, f"20 randomized configs, failing cases {failures}")


# -- 7 --------------------------------------------------------------------------


def test_c7_selection_metric_correlation(protocol_run):
    _, out, _, _ = protocol_run
    records = read_metrics(out / "metrics.jsonl")
    rho, p = spearmanr([r.d_rand for r in records], [r.target_acc for r in records])
    assert report(7, "selection-metric correlation", rho > 0, f"Spearman rho {rho:.3f} (> 0) over {len(records)} iteration points, p={p:.1e}")


# -- 8 --------------------------------------------------------------------------


def test_c8_determinism(protocol_run, workdir):
    cfg, out, _, _ = protocol_run
    rerun = workdir / "protocol_rerun"
    code = cli(["run-experiment", "--config", str(cfg), "--out", str(rerun)])
    a = hashlib.sha256((out / "metrics.jsonl").read_bytes()).hexdigest()
    b = hashlib.sha256((rerun / "metrics.jsonl").read_bytes()).hexdigest()
    assert report(8, "determinism", code == 0 and a == b, f"metrics.jsonl sha256 {a[:16]} vs {b[:16]}")


# -- 9 --------------------------------------------------------------------------


def test_c9_evaluation_isolation(workdir):
    data = workdir / "iso_data"
    assert cli(["gen-data", "--out", str(data)]) == 0
    runs = {}
    for name in ("with_eval", "without_eval"):
        if name == "without_eval":
            (data / "target_eval.csv").unlink()
        out = workdir / name
        codes = (
            cli(["train-base", "--data", str(data), "--out", str(out)]),
            cli(["adapt", "--data", str(data), "--out", str(out)]),
        )
        runs[name] = (codes, out)
    same = all(
        (runs["with_eval"][1] / f).read_bytes() == (runs["without_eval"][1] / f).read_bytes()
        for f in ("base.ckpt", "final.ckpt", "history.jsonl")
    )
    ok = runs["without_eval"][0] == (0, 0) and same
    assert report(9, "evaluation isolation", ok, f"train-base/adapt exit codes without eval file {runs['without_eval'][0]}, parameters identical: {same}")


def test_deepness_series_starts_non_decreasing(protocol_run, workdir):
    """Not a numbered criterion: one more distillation step should not hurt."""
    _, out, _, _ = protocol_run
    records = read_metrics(out / "metrics.jsonl")
    good = 0
    for trial in range(5):
        recs = sorted((r for r in records if r.trial == trial), key=lambda r: r.t)
        teacher_0 = recs[0].target_acc
        teacher_1 = recs[1].target_acc if len(recs) > 1 and recs[1].accepted else teacher_0
        good += teacher_1 >= teacher_0
    assert good >= 4


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
