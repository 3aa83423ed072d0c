"""Base OOD trainers: ERM, IRMv1 and GroupDRO on top of :mod:`simprov.nn`.

All three share one training loop. Each step draws a batch from every domain,
computes per-domain risks on a dropout-masked forward pass, combines them with
per-method weights and takes one optimizer step. Sharing the loop is what
makes the reductions exact: IRM with ``lam=0`` and GroupDRO with ``dro_eta=0``
follow the ERM trajectory with the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import nn
from .errors import InputError, NumericError

METHODS = ("erm", "irm", "groupdro")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 300
    batch_size: Optional[int] = None  # None: full batch per domain
    lam: float = 1e4
    penalty_warmup: Optional[int] = None  # None: first quarter of the epochs
    dro_eta: float = 0.01
    seed: int = 0
    optimizer: str = "adam"
    hidden: tuple = (32, 32)
    activation: str = "relu"
    dropout: float = 0.2

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.lr <= 0:
            raise InputError("lr must be > 0")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise InputError("batch_size must be >= 1 or None")
        if self.lam < 0:
            raise InputError("lam must be >= 0")
        if self.dro_eta < 0:
            raise InputError("dro_eta must be >= 0")

    @property
    def warmup_epochs(self) -> int:
        return self.epochs // 4 if self.penalty_warmup is None else self.penalty_warmup

    def penalty_weight(self, epoch: int) -> float:
        # warmup weight is capped at lam so lam=0 is a clean ERM reduction
        return min(1.0, self.lam) if epoch < self.warmup_epochs else self.lam

    def optimizer_config(self) -> nn.OptimizerConfig:
        return nn.OptimizerConfig(name=self.optimizer, lr=self.lr)


@dataclass
class RiskReport:
    """Per-domain risks and penalties for one step.

    ``total`` is the IRM composition ``sum(risks) + lam * sum(penalties)``;
    ``objective`` is what the optimizer actually descended.
    """

    risks: list
    penalties: list
    lam: float
    total: float
    objective: float


@dataclass
class FitResult:
    model: nn.MlpModel
    reports: list = field(default_factory=list)
    group_weights: list = field(default_factory=list)


def irm_penalty_from_logits(logits: np.ndarray, y: np.ndarray):
    """Squared derivative of ``w -> mean CE(w * logits, y)`` at ``w = 1``.

    Returns ``(penalty, d penalty / d logits)``.
    """
    n = len(y)
    p = nn.softmax(logits)
    resid = p.copy()
    resid[np.arange(n), y] -= 1.0
    g = float(np.sum(logits * resid)) / n
    zbar = np.sum(p * logits, axis=1, keepdims=True)
    dg = (resid + p * (logits - zbar)) / n
    return g * g, 2.0 * g * dg


def irm_penalty(model: nn.MlpModel, X, y, mask: Optional[nn.DropoutMask] = None) -> float:
    logits = nn.forward(model, X, mask)
    y = np.asarray(y, dtype=np.int64)
    return irm_penalty_from_logits(logits, y)[0]


def _validate_domains(domains, min_domains):
    if len(domains) < min_domains:
        raise InputError(f"need at least {min_domains} training domain(s), got {len(domains)}")
    dims = {X.shape[1] for X, _ in domains}
    if len(dims) != 1:
        raise InputError(f"inconsistent feature dimensions across domains: {sorted(dims)}")
    for X, y in domains:
        if len(X) == 0:
            raise InputError("empty training domain")
        if len(X) != len(y):
            raise InputError("features and labels disagree in length")


def _as_arrays(train):
    out = []
    for d in train:
        if isinstance(d, tuple):
            X, y = d
        else:
            X, y = d.X, d.y
        out.append((np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)))
    return out


def _epoch_batches(sizes, batch_size, rng):
    """Index arrays per step per domain. Shorter domains cycle their permutation."""
    if batch_size is None or all(batch_size >= n for n in sizes):
        return [[np.arange(n) for n in sizes]]
    perms = [rng.permutation(n) for n in sizes]
    steps = max(math.ceil(n / batch_size) for n in sizes)
    batches = []
    for s in range(steps):
        step = []
        for n, perm in zip(sizes, perms):
            idx = np.arange(s * batch_size, (s + 1) * batch_size) % n
            step.append(perm[idx[: min(batch_size, n)]])
        batches.append(step)
    return batches


def fit_domains(
    train,
    cfg: TrainConfig,
    method: str = "erm",
    n_classes: int = 2,
    domain_weights=None,
    record: bool = False,
    on_step: Optional[Callable] = None,
) -> FitResult:
    """Shared training loop.

    ``train`` is a list of DomainDatasets or ``(X, y)`` pairs. For ``erm`` and
    ``irm``, ``domain_weights`` (default uniform ``1/E``) scales each domain's
    risk; domains with zero weight are dropped before any random draw.
    """
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; expected one of {METHODS}")
    domains = _as_arrays(train)
    if domain_weights is None:
        domain_weights = [1.0 / len(domains)] * len(domains)
    if len(domain_weights) != len(domains):
        raise InputError("one weight per domain required")
    kept = [(d, w) for d, w in zip(domains, domain_weights) if w != 0]
    domains = [d for d, _ in kept]
    base_w = [w for _, w in kept]
    _validate_domains(domains, 1)

    init_seed, run_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    sizes = (domains[0][0].shape[1], *cfg.hidden, n_classes)
    model = nn.init_mlp(sizes, init_seed, cfg.activation, cfg.dropout)
    result = FitResult(model)
    rng = np.random.default_rng(run_seed)
    opt_cfg = cfg.optimizer_config()
    opt_state = None
    E = len(domains)
    q = np.full(E, 1.0 / E)
    step = 0

    for epoch in range(cfg.epochs):
        lam_t = cfg.penalty_weight(epoch) if method == "irm" else 0.0
        scale = 1.0 / lam_t if lam_t > 1.0 else 1.0
        for batch in _epoch_batches([len(y) for _, y in domains], cfg.batch_size, rng):
            caches, risks, penalties, dlogits = [], [], [], []
            for (X, y), idx in zip(domains, batch):
                Xb, yb = X[idx], y[idx]
                mask = None
                if model.dropout_rate > 0:
                    mask = nn.sample_mask(model, len(idx), int(rng.integers(2**63)))
                logits, pre, post = nn._forward_cache(model, Xb, mask)
                risk, _ = nn.softmax_ce(logits, yb)
                if not math.isfinite(risk):
                    raise NumericError(f"non-finite risk at step {step}")
                caches.append((pre, post, mask))
                risks.append(risk)
                d_ce = nn.ce_logit_grad(logits, yb)
                if lam_t > 0:
                    pen, d_pen = irm_penalty_from_logits(logits, yb)
                    penalties.append(pen)
                    dlogits.append((d_ce, d_pen))
                else:
                    penalties.append(0.0)
                    dlogits.append((d_ce, None))

            if method == "groupdro":
                q = q * np.exp(cfg.dro_eta * np.asarray(risks))
                q = q / q.sum()
                risk_w = list(q)
            else:
                risk_w = [w * scale for w in base_w]
            pen_w = [w * scale * lam_t for w in base_w]

            grads = None
            for (pre, post, mask), (d_ce, d_pen), rw, pw in zip(caches, dlogits, risk_w, pen_w):
                delta = rw * d_ce
                if d_pen is not None:
                    delta = delta + pw * d_pen
                g = nn._backprop_cached(model, pre, post, delta, mask)
                grads = g if grads is None else grads.add_(g)

            total = float(np.sum(risks) + lam_t * np.sum(penalties))
            objective = float(
                np.dot(risk_w, risks) + (np.dot(pen_w, penalties) if lam_t > 0 else 0.0)
            )
            if not math.isfinite(objective):
                raise NumericError(f"non-finite objective at step {step}")
            model, opt_state = nn.opt_step(model, grads, opt_state, opt_cfg)
            report = RiskReport(risks, penalties, lam_t, total, objective)
            if record:
                result.reports.append(report)
                result.group_weights.append(q.copy())
            if on_step is not None:
                on_step(step, model, report, q.copy())
            step += 1

    result.model = model
    return result


def train_erm(train, cfg: TrainConfig, n_classes: int = 2) -> nn.MlpModel:
    return fit_domains(train, cfg, "erm", n_classes).model


def train_irm(train, cfg: TrainConfig, n_classes: int = 2) -> nn.MlpModel:
    """IRMv1: per-domain risk plus ``lam`` times the squared dummy-scale gradient.

    Needs at least two domains unless ``lam == 0``.
    """
    if len(train) < 2 and cfg.lam > 0:
        raise InputError("IRM needs at least 2 training domains")
    return fit_domains(train, cfg, "irm", n_classes).model


def train_groupdro(train, cfg: TrainConfig, n_classes: int = 2) -> nn.MlpModel:
    if len(train) < 2:
        raise InputError("GroupDRO needs at least 2 training domains")
    return fit_domains(train, cfg, "groupdro", n_classes).model


TRAINERS = {"erm": train_erm, "irm": train_irm, "groupdro": train_groupdro}


def train_base(method: str, train, cfg: TrainConfig, n_classes: int = 2) -> nn.MlpModel:
    try:
        trainer = TRAINERS[method]
    except KeyError:
        raise InputError(f"unknown base method {method!r}") from None
    return trainer(train, cfg, n_classes)


def risk_report(model: nn.MlpModel, train, lam: float) -> RiskReport:
    """Evaluation-mode risks and penalties over whole domains."""
    risks, penalties = [], []
    for X, y in _as_arrays(train):
        logits = nn.forward(model, X)
        risks.append(nn.softmax_ce(logits, y)[0])
        penalties.append(irm_penalty_from_logits(logits, y)[0])
    total = float(np.sum(risks) + lam * np.sum(penalties))
    return RiskReport(risks, penalties, lam, total, total / len(risks))
