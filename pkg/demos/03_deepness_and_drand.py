"""
Deepness and the selection metric across trials
===============================================

Runs the five-trial protocol, then turns the metrics stream into the two
plot tables: accuracy versus deepness and accuracy versus d_rand.
"""

import csv
import tempfile
from pathlib import Path

import numpy as np

from simprov.harness import config_from_dict, emit_plot_data, read_metrics, run_experiment

out = Path(tempfile.mkdtemp(prefix="simprov_demo_"))
cfg = config_from_dict({"n_trials": 5, "baselines": ["erm"]})
summary = run_experiment(cfg, out)

for name in ("base", "simprov"):
    s = summary[name]
    print(f"{name:>8}: {s['mean']:.3f} +- {s['std']:.3f}")
print(f"     erm: {summary['baselines']['erm']['mean']:.3f}")

# teacher accuracy after D distillation steps, averaged over trials
with open(emit_plot_data(out / "metrics.jsonl", "deepness", out / "deepness.csv")) as fh:
    for row in csv.DictReader(fh):
        print(f"D={row['D']:>2}  {float(row['mean_target_acc']):.3f} +- {float(row['std']):.3f}")

emit_plot_data(out / "metrics.jsonl", "drand_scatter", out / "drand_scatter.csv")
recs = read_metrics(out / "metrics.jsonl")
d = np.array([r.d_rand for r in recs])
acc = np.array([r.target_acc for r in recs])
rank = lambda v: np.argsort(np.argsort(v))
print("rank correlation of d_rand and target accuracy:", np.corrcoef(rank(d), rank(acc))[0, 1])
print("plot tables in", out)
