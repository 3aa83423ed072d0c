"""
One adaptation run, step by step
================================

Start from an IRM model, pseudo-label the unlabeled target with dropout
votes, then let the teacher/student loop run and watch which students the
distance-from-chance gate keeps.
"""

import numpy as np

from simprov import nn
from simprov.adapt import AdaptConfig, mc_pseudo_label, select_top, simprov_adapt
from simprov.base import TrainConfig, train_irm
from simprov.data import default_benchmark

bench = default_benchmark(seed=3)
X_t = bench.target.X                      # features only, no labels
X_ev, y_ev = bench.target_eval.X, bench.target_eval.y

base = train_irm(bench.train, TrainConfig(seed=3))
print("IRM target accuracy:", nn.accuracy(base, X_ev, y_ev))

# ten dropout passes per target sample
records = mc_pseudo_label(base, X_t, m=10, d=0.2, seed=0)
kappa = np.array([r.kappa for r in records])
print("unanimous votes:", np.mean(kappa == 0.0))
print("most uncertain kappa:", kappa.min())

# the most confident half of the pseudo-labels
half = select_top(records, X_t, 0.5)
print("selected", len(half), "of", len(records))

cfg = AdaptConfig(seed=3)


def show(rec, model):
    flag = "keep" if rec.accepted else "drop"
    print(
        f"t={rec.t:2d}  d_rand={rec.d_rand:.3f}  train acc={rec.train_acc:.3f}  "
        f"target acc={nn.accuracy(model, X_ev, y_ev):.3f}  {flag}"
    )


final, state = simprov_adapt(base, bench.train, X_t, cfg, on_iteration=show)
print("accepted iterations:", state.accepted_iterations)
print("Simprov-IRM target accuracy:", nn.accuracy(final, X_ev, y_ev))

# train accuracy far *below* chance still counts: the student has found the
# color, just with the target's sign, which is the sign that transfers
