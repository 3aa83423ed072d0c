"""Target-domain adaptation: MC-dropout pseudo-labels, confidence-ranked
self-distillation and the distance-from-chance teacher gate.

Nothing in this module touches target labels; the target domain enters only
as a feature matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn
from .base import TrainConfig, fit_domains
from .data import pool
from .errors import InputError

KAPPA_MODES = ("variance", "disagreement")


@dataclass
class PseudoLabelRecord:
    sample_index: int
    votes: list
    label: int
    kappa: float


@dataclass
class SelectedBatch:
    X: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)


def default_student() -> TrainConfig:
    # a few epochs only: the student should pick up the easiest direction
    # consistent with the pseudo-labels, not re-converge to the teacher
    return TrainConfig(epochs=6, lr=3e-3)


@dataclass
class AdaptConfig:
    m: int = 10
    dropout: float = 0.2
    select_fraction: float = 1.0
    alpha: float = 1.0
    deepness: int = 10
    patience: int = 5
    student: TrainConfig = field(default_factory=default_student)
    seed: int = 0
    kappa_mode: str = "variance"
    d_rand_mode: str = "pooled"

    def __post_init__(self):
        if self.m < 1:
            raise InputError("m must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise InputError("dropout must be in [0, 1)")
        if not 0.0 < self.select_fraction <= 1.0:
            raise InputError("select_fraction must be in (0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError("alpha must be in [0, 1]")
        if self.deepness < 1:
            raise InputError("deepness must be >= 1")
        if self.patience < 1:
            raise InputError("patience must be >= 1")
        if self.kappa_mode not in KAPPA_MODES:
            raise InputError(f"kappa_mode must be one of {KAPPA_MODES}")
        if self.d_rand_mode not in ("pooled", "per_domain"):
            raise InputError("d_rand_mode must be 'pooled' or 'per_domain'")


@dataclass
class IterationRecord:
    t: int
    d_rand: float
    accepted: bool
    n_selected: int
    mean_kappa: float
    train_acc: float


@dataclass
class AdaptationState:
    t: int
    teacher: nn.MlpModel
    best_d_rand: float
    history: list = field(default_factory=list)

    @property
    def accepted_iterations(self) -> list:
        return [r.t for r in self.history if r.accepted]


def majority_vote(votes, k: int) -> int:
    """Most frequent class; ties go to the smallest index."""
    votes = np.asarray(votes, dtype=np.int64)
    if votes.size == 0:
        raise InputError("cannot vote on an empty set")
    if votes.min() < 0 or votes.max() >= k:
        raise InputError(f"votes must lie in [0, {k})")
    return int(np.argmax(np.bincount(votes, minlength=k)))


def confidence(votes, mode: str = "variance") -> float:
    """Negative population variance of the votes (0 when unanimous).

    ``mode="disagreement"`` returns ``-(1 - mode_count / m)`` instead, which does
    not depend on how classes are numbered.
    """
    votes = np.asarray(votes, dtype=np.float64)
    if votes.size == 0:
        raise InputError("cannot score an empty vote set")
    if mode == "variance":
        return -float(np.var(votes))
    if mode == "disagreement":
        counts = np.unique(votes, return_counts=True)[1]
        return -(1.0 - counts.max() / votes.size)
    raise InputError(f"unknown confidence mode {mode!r}")


def mc_pseudo_label(
    model: nn.MlpModel,
    X_target,
    m: int,
    d: float,
    seed: int,
    kappa_mode: str = "variance",
) -> list:
    """``m`` dropout-masked passes per sample, fused by majority vote.

    Pass ``i`` uses its own mask seed spawned from ``seed``; votes are stored in
    pass order.
    """
    if m < 1:
        raise InputError("m must be >= 1")
    X_target = np.asarray(X_target, dtype=np.float64)
    n = len(X_target)
    pass_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(m)]
    votes = np.empty((n, m), dtype=np.int64)
    for i, s in enumerate(pass_seeds):
        mask = nn.sample_mask(model, n, s, rate=d)
        votes[:, i] = nn.predict(model, X_target, mask)
    k = model.n_classes
    return [
        PseudoLabelRecord(j, votes[j].tolist(), majority_vote(votes[j], k), confidence(votes[j], kappa_mode))
        for j in range(n)
    ]


def select_top(records, X_target, q: float) -> SelectedBatch:
    """Keep the ``ceil(q * n)`` most confident records; ties by sample index."""
    if not 0.0 < q <= 1.0:
        raise InputError("q must be in (0, 1]")
    X_target = np.asarray(X_target, dtype=np.float64)
    n_keep = math.ceil(q * len(records))
    ranked = sorted(records, key=lambda r: (-r.kappa, r.sample_index))[:n_keep]
    idx = np.array([r.sample_index for r in ranked], dtype=np.int64)
    labels = np.array([r.label for r in ranked], dtype=np.int64)
    return SelectedBatch(X_target[idx].reshape(len(idx), X_target.shape[1]), labels, idx)


def distill_student(
    selected: SelectedBatch,
    source=None,
    alpha: float = 1.0,
    cfg: Optional[TrainConfig] = None,
    seed: Optional[int] = None,
    n_classes: int = 2,
) -> nn.MlpModel:
    """Train a fresh student on ``alpha * CE(target pseudo) + (1 - alpha) * CE(source)``.

    ``source`` is an ``(X, y)`` pair or a list of datasets with true labels.
    """
    if len(selected) == 0:
        raise InputError("empty pseudo-labeled selection")
    cfg = TrainConfig() if cfg is None else cfg
    if seed is not None:
        cfg = _with_seed(cfg, seed)
    domains = [(selected.X, selected.labels)]
    weights = [1.0]
    if source is not None and alpha < 1.0:
        src = source if isinstance(source, tuple) else pool(source)
        domains.append(src)
        weights = [alpha, 1.0 - alpha]
    return fit_domains(domains, cfg, "erm", n_classes, domain_weights=weights).model


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


def chance_distance(acc: float, k: int) -> float:
    return abs(acc - 1.0 / k)


def d_rand(model: nn.MlpModel, train, k: Optional[int] = None, mode: str = "pooled") -> float:
    """``|accuracy on training domains - 1/k|`` in evaluation mode."""
    k = model.n_classes if k is None else k
    if k != model.n_classes:
        raise InputError(f"k={k} but the model has {model.n_classes} classes")
    train = list(train)
    if not train or sum(len(d) for d in train) == 0:
        raise InputError("d_rand needs non-empty training data")
    if mode == "per_domain":
        return chance_distance(float(np.mean([nn.accuracy(model, d.X, d.y) for d in train])), k)
    X, y = pool(train)
    return chance_distance(nn.accuracy(model, X, y), k)


def _train_accuracy(model, train):
    X, y = pool(train)
    return nn.accuracy(model, X, y)


def simprov_adapt(
    base: nn.MlpModel,
    train,
    X_target,
    cfg: AdaptConfig,
    on_iteration: Optional[Callable] = None,
):
    """Teacher/student loop gated by distance from chance on the training domains.

    ``on_iteration(record, model)`` is called for the base model (t=0) and every
    student, accepted or not. Returns ``(final_model, state)``.
    """
    train = list(train)
    X_target = np.asarray(X_target, dtype=np.float64)
    k = base.n_classes
    source = pool(train) if cfg.alpha < 1.0 else None

    d0 = d_rand(base, train, k, cfg.d_rand_mode)
    state = AdaptationState(0, base, d0)
    rec0 = IterationRecord(0, d0, True, 0, 0.0, _train_accuracy(base, train))
    state.history.append(rec0)
    if on_iteration is not None:
        on_iteration(rec0, base)

    rejections = 0
    for t in range(1, cfg.deepness + 1):
        pl_seed, student_seed = (
            int(s.generate_state(1)[0]) for s in np.random.SeedSequence([cfg.seed, t]).spawn(2)
        )
        records = mc_pseudo_label(state.teacher, X_target, cfg.m, cfg.dropout, pl_seed, cfg.kappa_mode)
        selected = select_top(records, X_target, cfg.select_fraction)
        student = distill_student(selected, source, cfg.alpha, cfg.student, student_seed, k)
        dt = d_rand(student, train, k, cfg.d_rand_mode)
        accepted = dt > state.best_d_rand
        kappas = [records[j].kappa for j in selected.indices]
        rec = IterationRecord(
            t, dt, accepted, len(selected), float(np.mean(kappas)), _train_accuracy(student, train)
        )
        state.history.append(rec)
        state.t = t
        if on_iteration is not None:
            on_iteration(rec, student)
        if accepted:
            state.teacher = student
            state.best_d_rand = dt
            rejections = 0
        else:
            rejections += 1
            if rejections >= cfg.patience:
                break
    return state.teacher, state
