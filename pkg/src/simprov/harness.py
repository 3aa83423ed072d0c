"""Experiment runner, metrics files and checkpoints.

A run writes one directory per trial (``trial_000``, ...) holding its own
``metrics.jsonl`` and ``timings.jsonl``; the top-level ``metrics.jsonl`` is the
concatenation of the trial streams in trial order and ``summary.json`` is
computed from them afterwards. Everything except ``timings.jsonl`` is a pure
function of the config file.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import nn
from .adapt import AdaptConfig, default_student, simprov_adapt
from .base import METHODS, TrainConfig, train_base
from .data import BENCHMARK_DOMAIN, TARGET_FLIP_PROB, TRAIN_FLIP_PROBS, Benchmark, DomainSpec, benchmark_specs, generate_domain
from .errors import (
    CheckpointError,
    CheckpointParseError,
    CheckpointSchemaError,
    ConfigError,
    InputError,
)

# -- config -------------------------------------------------------------------

_SPEC_KEYS = {f.name for f in dataclasses.fields(DomainSpec)} - {"domain_id", "spur_flip_prob", "seed"}


@dataclass
class BenchmarkConfig:
    train_flip_probs: tuple = TRAIN_FLIP_PROBS
    target_flip_prob: float = TARGET_FLIP_PROB
    domain: dict = field(default_factory=lambda: dict(BENCHMARK_DOMAIN))  # DomainSpec overrides for every domain

    def __post_init__(self):
        self.train_flip_probs = tuple(self.train_flip_probs)
        unknown = set(self.domain) - _SPEC_KEYS
        if unknown:
            raise ConfigError(f"unknown key(s) in benchmark.domain: {sorted(unknown)}")

    def specs(self, seed: int) -> list:
        return benchmark_specs(seed, self.train_flip_probs, self.target_flip_prob, **self.domain)

    def build(self, seed: int) -> Benchmark:
        *train, target, target_eval = (generate_domain(s) for s in self.specs(seed))
        return Benchmark(train, target, target_eval)


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    base_method: str = "irm"
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    baselines: tuple = ()
    n_trials: int = 5
    master_seed: int = 0
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        self.baselines = tuple(self.baselines)
        if self.base_method not in METHODS:
            raise ConfigError(f"base_method must be one of {METHODS}")
        for b in self.baselines:
            if b not in METHODS:
                raise ConfigError(f"unknown baseline {b!r}")
        if self.n_trials < 1:
            raise ConfigError("n_trials must be >= 1")

    def trial_seed(self, trial: int) -> int:
        return self.master_seed + trial

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where, nested=None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    kwargs = dict(data)
    for key, sub in (nested or {}).items():
        if key in kwargs:
            kwargs[key] = sub(kwargs[key], f"{where}.{key}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (InputError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    def train(d, where):
        return _build(TrainConfig, d, where)

    def student(d, where):
        # partial student sections start from the student defaults, not the base ones
        if isinstance(d, dict):
            d = {**dataclasses.asdict(default_student()), **d}
        return _build(TrainConfig, d, where)

    def adapt(d, where):
        return _build(AdaptConfig, d, where, {"student": student})

    def bench(d, where):
        return _build(BenchmarkConfig, d, where)

    return _build(
        ExperimentConfig, data, "config", {"benchmark": bench, "train": train, "adapt": adapt}
    )


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data or {})


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")


# -- metrics ------------------------------------------------------------------


@dataclass
class MetricsRecord:
    trial: int
    phase: str  # "base" or "adapt"
    t: int
    d_rand: float
    train_acc: float
    target_acc: float
    n_selected: int
    mean_kappa: float
    accepted: bool


def _json_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False) + "\n"


def read_metrics(path) -> list:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(MetricsRecord(**json.loads(line)))
    return out


def mean_std(values) -> dict:
    """Mean and sample standard deviation; a single value gets std 0 and a flag."""
    values = [float(v) for v in values]
    if not values:
        return {"n": 0, "mean": None, "std": None, "single_trial": False}
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"n": len(values), "mean": statistics.fmean(values), "std": std, "single_trial": len(values) == 1}


# -- experiment ---------------------------------------------------------------


def run_trial(cfg: ExperimentConfig, trial: int, trial_dir: Path) -> dict:
    """One seeded trial. Target-eval labels are read only inside ``score``."""
    seed = cfg.trial_seed(trial)
    bench = cfg.benchmark.build(seed)
    X_eval, y_eval = bench.target_eval.X, bench.target_eval.y

    def score(model):
        return nn.accuracy(model, X_eval, y_eval)

    timings = {}
    t0 = time.perf_counter()
    train_cfg = dataclasses.replace(cfg.train, seed=seed)
    base = train_base(cfg.base_method, bench.train, train_cfg)
    timings["base_ms"] = (time.perf_counter() - t0) * 1e3

    records = []
    iter_clock = [time.perf_counter()]
    iter_ms = []

    def on_iteration(rec, model):
        now = time.perf_counter()
        iter_ms.append((now - iter_clock[0]) * 1e3)
        iter_clock[0] = now
        records.append(
            MetricsRecord(
                trial, "base" if rec.t == 0 else "adapt", rec.t, rec.d_rand, rec.train_acc,
                score(model), rec.n_selected, rec.mean_kappa, rec.accepted,
            )
        )

    adapt_cfg = dataclasses.replace(cfg.adapt, seed=seed)
    final, state = simprov_adapt(base, bench.train, bench.target.X, adapt_cfg, on_iteration)

    baselines = {}
    for method in cfg.baselines:
        t0 = time.perf_counter()
        baselines[method] = score(train_base(method, bench.train, train_cfg))
        timings[f"{method}_ms"] = (time.perf_counter() - t0) * 1e3

    with open(trial_dir / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(_json_line(dataclasses.asdict(r)))
    with open(trial_dir / "timings.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for r, ms in zip(records, iter_ms):
            fh.write(_json_line({"trial": trial, "t": r.t, "wall_ms": ms}))
        fh.write(_json_line({"trial": trial, **timings}))
    save_checkpoint(final, trial_dir / "final.ckpt", provenance={"config": cfg.digest(), "trial": trial})

    return {
        "trial": trial,
        "seed": seed,
        "status": "ok",
        "base_acc": score(base),
        "final_acc": score(final),
        "final_d_rand": state.best_d_rand,
        "accepted_iterations": state.accepted_iterations,
        "iterations_run": state.t,
        "baselines": baselines,
    }


def summarize(cfg: ExperimentConfig, trials: list) -> dict:
    ok = [t for t in trials if t["status"] == "ok"]
    summary = {
        "config_sha256": cfg.digest(),
        "base_method": cfg.base_method,
        "n_trials": cfg.n_trials,
        "n_ok": len(ok),
        "failures": [{"trial": t["trial"], "error": t["error"]} for t in trials if t["status"] != "ok"],
        "base": mean_std([t["base_acc"] for t in ok]),
        "simprov": mean_std([t["final_acc"] for t in ok]),
        "baselines": {m: mean_std([t["baselines"][m] for t in ok]) for m in cfg.baselines},
        "trials": trials,
    }
    if ok:
        # cross-trial selection by distance from chance, reported separately
        best = max(ok, key=lambda t: (t["final_d_rand"], -t["trial"]))
        summary["best_by_d_rand"] = {
            "trial": best["trial"], "d_rand": best["final_d_rand"], "target_acc": best["final_acc"],
        }
    return summary


def run_experiment(cfg: ExperimentConfig, output_dir=None) -> dict:
    """Run ``cfg.n_trials`` trials; a failing trial is recorded and skipped."""
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    trials = []
    for i in range(cfg.n_trials):
        trial_dir = out / f"trial_{i:03d}"
        trial_dir.mkdir(exist_ok=True)
        try:
            trials.append(run_trial(cfg, i, trial_dir))
        except (ArithmeticError, ValueError) as exc:
            (trial_dir / "metrics.jsonl").write_text("", encoding="utf-8")
            trials.append({"trial": i, "seed": cfg.trial_seed(i), "status": "failed",
                           "error": f"{type(exc).__name__}: {exc}"})
    with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for i in range(cfg.n_trials):
            fh.write((out / f"trial_{i:03d}" / "metrics.jsonl").read_text(encoding="utf-8"))
    summary = summarize(cfg, trials)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


# -- plot data ----------------------------------------------------------------

PLOT_KINDS = ("deepness", "drand_scatter")


def _teacher_curves(records) -> dict:
    """Per trial: target accuracy of the current teacher after each iteration."""
    by_trial = {}
    for r in records:
        by_trial.setdefault(r.trial, []).append(r)
    curves = {}
    for trial, recs in by_trial.items():
        recs.sort(key=lambda r: r.t)
        acc, curve = None, []
        for r in recs:
            if r.accepted:
                acc = r.target_acc
            curve.append(acc)
        curves[trial] = curve
    return curves


def emit_plot_data(metrics_path, kind: str, out_path) -> Path:
    """Write plot-ready CSV rows from a metrics stream.

    ``deepness``: ``D, mean_target_acc, std, n_trials`` where ``D`` counts
    distillation iterations and trials that stopped early keep their teacher.
    ``drand_scatter``: one ``trial, t, d_rand, target_acc`` row per iteration.
    """
    if kind not in PLOT_KINDS:
        raise InputError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    records = read_metrics(metrics_path)
    out_path = Path(out_path)
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if kind == "drand_scatter":
            w.writerow(["trial", "t", "d_rand", "target_acc"])
            for r in records:
                w.writerow([r.trial, r.t, repr(r.d_rand), repr(r.target_acc)])
        else:
            w.writerow(["D", "mean_target_acc", "std", "n_trials"])
            curves = _teacher_curves(records)
            depth = max((len(c) for c in curves.values()), default=0)
            for D in range(depth):
                accs = [c[min(D, len(c) - 1)] for c in curves.values()]
                stats = mean_std(accs)
                w.writerow([D, repr(stats["mean"]), repr(stats["std"]), stats["n"]])
    return out_path


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "simprov-checkpoint"
CHECKPOINT_VERSION = 1


def _hex(a: np.ndarray) -> list:
    if a.ndim == 1:
        return [float(v).hex() for v in a]
    return [_hex(row) for row in a]


def save_checkpoint(model: nn.MlpModel, path, rng: Optional[dict] = None, provenance: Optional[dict] = None) -> None:
    """Versioned JSON document; every weight is stored as a hex float string."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": {
            "sizes": list(model.sizes),
            "activation": model.activation,
            "dropout_rate": float(model.dropout_rate).hex(),
        },
        "layers": [{"weight": _hex(W), "bias": _hex(b)} for W, b in zip(model.weights, model.biases)],
        "rng": rng or {},
        "provenance": provenance or {},
    }
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _unhex(values, shape, where):
    try:
        arr = np.array([[float.fromhex(v) for v in row] for row in values] if len(shape) == 2
                       else [float.fromhex(v) for v in values], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{where}: {exc}") from None
    if arr.shape != shape:
        raise CheckpointError(f"{where}: shape {arr.shape} does not match architecture {shape}")
    return arr


def load_checkpoint(path) -> nn.MlpModel:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointParseError("not UTF-8 text", exc.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise CheckpointParseError(exc.msg, offset) from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointSchemaError("not a simprov checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointSchemaError(
            f"unsupported checkpoint version {doc.get('version')!r} (expected {CHECKPOINT_VERSION})"
        )
    try:
        arch = doc["architecture"]
        sizes = [int(s) for s in arch["sizes"]]
        layers = doc["layers"]
        if len(layers) != len(sizes) - 1:
            raise CheckpointError(f"{len(layers)} layers for sizes {sizes}")
        weights = [_unhex(l["weight"], (a, b), f"layer {i} weight") for i, (l, a, b) in enumerate(zip(layers, sizes, sizes[1:]))]
        biases = [_unhex(l["bias"], (b,), f"layer {i} bias") for i, (l, b) in enumerate(zip(layers, sizes[1:]))]
        return nn.MlpModel(weights, biases, arch["activation"], float.fromhex(arch["dropout_rate"]))
    except KeyError as exc:
        raise CheckpointSchemaError(f"missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(str(exc)) from None
