"""Command-line entry point: ``python -m simprov <command> ...``.

Exit codes: 0 success, 1 usage or input error, 2 a training trial failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import nn
from .adapt import simprov_adapt
from .base import train_base
from .data import load_csv, save_csv
from .errors import CheckpointError, ConfigError, DatasetParseError, InputError, NumericError
from .harness import (
    PLOT_KINDS,
    ExperimentConfig,
    MetricsRecord,
    emit_plot_data,
    load_checkpoint,
    load_config,
    run_experiment,
    save_checkpoint,
)

EXIT_OK, EXIT_USAGE, EXIT_TRIAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    return cfg


def _train_files(data_dir: Path) -> list:
    files = sorted(data_dir.glob("train_*.csv"))
    if not files:
        raise UsageError(f"no train_*.csv files in {data_dir}")
    return files


def _require(path: Path) -> Path:
    if not path.exists():
        raise UsageError(f"missing file: {path}")
    return path


def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench = cfg.benchmark.build(cfg.trial_seed(0))
    for ds in bench.all:
        save_csv(ds, out / f"{ds.domain_id}.csv")
    print(f"wrote {len(bench.all)} domain files to {out}")


def cmd_train_base(args):
    cfg = _config(args)
    data, out = Path(args.data), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = [load_csv(p) for p in _train_files(data)]
    seed = cfg.trial_seed(0)
    model = train_base(cfg.base_method, train, dataclasses.replace(cfg.train, seed=seed))
    save_checkpoint(model, out / "base.ckpt", rng={"seed": seed}, provenance={"config": cfg.digest(), "method": cfg.base_method})
    print(f"saved {cfg.base_method} base model to {out / 'base.ckpt'}")


def cmd_adapt(args):
    cfg = _config(args)
    data, out = Path(args.data), Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = [load_csv(p) for p in _train_files(data)]
    # only the features of the target file are used
    X_target = load_csv(_require(data / "target.csv")).X
    base = load_checkpoint(_require(Path(args.checkpoint) if args.checkpoint else out / "base.ckpt"))
    seed = cfg.trial_seed(0)
    iters = out / "iterations"
    iters.mkdir(exist_ok=True)
    history = []

    def on_iteration(rec, model):
        save_checkpoint(model, iters / f"t{rec.t:03d}.ckpt", rng={"seed": seed, "t": rec.t})
        history.append(dataclasses.asdict(rec))

    final, state = simprov_adapt(base, train, X_target, dataclasses.replace(cfg.adapt, seed=seed), on_iteration)
    save_checkpoint(final, out / "final.ckpt", rng={"seed": seed}, provenance={"config": cfg.digest()})
    with open(out / "history.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for h in history:
            fh.write(json.dumps(h, sort_keys=True) + "\n")
    print(f"accepted iterations {state.accepted_iterations}; best d_rand {state.best_d_rand:.4f}")


def cmd_evaluate(args):
    data, out = Path(args.data), Path(args.out)
    ds = load_csv(_require(data / "target_eval.csv"))
    if args.checkpoint:
        acc = nn.accuracy(load_checkpoint(_require(Path(args.checkpoint))), ds.X, ds.y)
        print(json.dumps({"checkpoint": args.checkpoint, "target_acc": acc}))
        return
    result = {}
    for name in ("base", "final"):
        path = out / f"{name}.ckpt"
        if path.exists():
            result[f"{name}_acc"] = nn.accuracy(load_checkpoint(path), ds.X, ds.y)
    hist_path = out / "history.jsonl"
    if hist_path.exists():
        with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for line in hist_path.read_text(encoding="utf-8").splitlines():
                h = json.loads(line)
                model = load_checkpoint(_require(out / "iterations" / f"t{h['t']:03d}.ckpt"))
                rec = MetricsRecord(
                    0, "base" if h["t"] == 0 else "adapt", h["t"], h["d_rand"], h["train_acc"],
                    nn.accuracy(model, ds.X, ds.y), h["n_selected"], h["mean_kappa"], h["accepted"],
                )
                fh.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")
    if not result:
        raise UsageError(f"nothing to evaluate in {out}")
    (out / "evaluation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(result, sort_keys=True))


def cmd_run_experiment(args):
    cfg = _config(args)
    summary = run_experiment(cfg, args.out)
    base, simprov = summary["base"], summary["simprov"]
    if summary["n_ok"]:
        print(f"{cfg.base_method}: {base['mean']:.4f} +- {base['std']:.4f}")
        print(f"simprov-{cfg.base_method}: {simprov['mean']:.4f} +- {simprov['std']:.4f}")
        for m, s in summary["baselines"].items():
            print(f"{m}: {s['mean']:.4f} +- {s['std']:.4f}")
    for f in summary["failures"]:
        print(f"trial {f['trial']} failed: {f['error']}", file=sys.stderr)
    return EXIT_TRIAL if summary["failures"] else EXIT_OK


def cmd_emit_plots(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = _require(Path(args.metrics) if args.metrics else out / "metrics.jsonl")
    for kind in [args.kind] if args.kind else PLOT_KINDS:
        print(emit_plot_data(metrics, kind, out / f"{kind}.csv"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simprov", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help, data=False, checkpoint=False):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="experiment YAML (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="directory written by gen-data")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint path")
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "generate the benchmark domains as CSV")
    add("train-base", cmd_train_base, "train the base model on train_*.csv", data=True)
    add("adapt", cmd_adapt, "adapt a base checkpoint to target.csv", data=True, checkpoint=True)
    add("evaluate", cmd_evaluate, "score checkpoints on target_eval.csv", data=True, checkpoint=True)
    add("run-experiment", cmd_run_experiment, "run the multi-trial protocol")
    p = add("emit-plots", cmd_emit_plots, "write plot CSVs from a metrics stream")
    p.add_argument("--metrics", help="metrics.jsonl (default: OUT/metrics.jsonl)")
    p.add_argument("--kind", choices=PLOT_KINDS, help="one kind only (default: both)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except (UsageError, ConfigError, DatasetParseError, CheckpointError, InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_TRIAL
    return EXIT_OK if code is None else code
