"""Small feed-forward classifier in plain numpy.

Everything the adaptation loop needs from a network lives here: seeded
initialization, forward passes with explicit dropout masks, softmax
cross-entropy, analytic backpropagation and SGD/Adam updates. Dropout masks
are values, not hidden state, so a Monte Carlo pass is reproducible from its
seed alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InputError, NumericError, ShapeError

_ACTIVATIONS = ("relu", "tanh")


@dataclass
class MlpModel:
    """Weights are stored ``[in, out]`` so that ``h @ W + b`` is one layer."""

    weights: list
    biases: list
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InputError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("weights and biases must be non-empty lists of equal length")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ShapeError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i > 0 and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ShapeError(
                    f"layer {i}: input dim {W.shape[0]} != previous output "
                    f"{self.weights[i - 1].shape[1]}"
                )
        if self.n_classes < 2:
            raise ShapeError("final layer must produce at least 2 classes")

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden_sizes(self) -> tuple:
        return self.sizes[1:-1]

    def copy(self) -> "MlpModel":
        return MlpModel(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.dropout_rate,
        )


@dataclass
class DropoutMask:
    """One ``[rows, width]`` matrix per hidden layer with entries in {0, 1/(1-d)}."""

    masks: list
    seed: Optional[int] = None


@dataclass
class Gradients:
    weights: list
    biases: list

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([g * factor for g in self.weights], [g * factor for g in self.biases])

    def add_(self, other: "Gradients") -> "Gradients":
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        return self

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "Gradients":
        return cls([np.zeros_like(W) for W in model.weights], [np.zeros_like(b) for b in model.biases])


def init_mlp(
    sizes: Sequence[int],
    seed: int,
    activation: str = "relu",
    dropout_rate: float = 0.0,
) -> MlpModel:
    """Glorot-uniform weights, zero biases. ``sizes`` = (in, hidden..., n_classes)."""
    if len(sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, activation, dropout_rate)


def _act(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    return np.tanh(a)


def _act_grad(name, a, h):
    if name == "relu":
        return (a > 0).astype(a.dtype)
    return 1.0 - h * h


def _check_input(model: MlpModel, X: np.ndarray, mask: Optional[DropoutMask]):
    if X.ndim != 2:
        raise ShapeError(f"X must be 2-D, got shape {X.shape}")
    if X.shape[1] != model.weights[0].shape[0]:
        raise ShapeError(
            f"layer 0: input has {X.shape[1]} columns, expected {model.weights[0].shape[0]}"
        )
    if mask is not None:
        hidden = model.hidden_sizes
        if len(mask.masks) != len(hidden):
            raise ShapeError(f"mask has {len(mask.masks)} layers, model has {len(hidden)} hidden layers")
        for i, (M, width) in enumerate(zip(mask.masks, hidden)):
            if M.shape != (X.shape[0], width):
                raise ShapeError(
                    f"hidden layer {i}: mask shape {M.shape} != activation shape {(X.shape[0], width)}"
                )


def _forward_cache(model, X, mask):
    _check_input(model, X, mask)
    pre, post = [], [X]
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        a = h @ W + b
        if i == last:
            return a, pre, post
        h = _act(model.activation, a)
        pre.append(a)
        if mask is not None:
            h = h * mask.masks[i]
        post.append(h)


def forward(model: MlpModel, X, mask: Optional[DropoutMask] = None) -> np.ndarray:
    """Logits ``[n, k]``. Without a mask this is the evaluation-mode pass."""
    logits, _, _ = _forward_cache(model, np.asarray(X, dtype=np.float64), mask)
    return logits


def predict(model: MlpModel, X, mask: Optional[DropoutMask] = None) -> np.ndarray:
    return np.argmax(forward(model, X, mask), axis=1)


def accuracy(model: MlpModel, X, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise InputError("cannot score an empty set")
    return float(np.mean(predict(model, X) == y))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(y, n, k):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InputError("labels must be integer class indices")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    return y


def softmax_ce(logits, labels):
    """Return ``(mean_loss, per_sample_loss)`` of softmax cross-entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    per_sample = -log_softmax(logits)[np.arange(len(y)), y]
    return float(per_sample.mean()), per_sample


def ce_logit_grad(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(mean CE)/d(logits)."""
    g = softmax(logits)
    g[np.arange(len(y)), y] -= 1.0
    return g / len(y)


def backprop(model: MlpModel, X, dlogits: np.ndarray, mask: Optional[DropoutMask] = None) -> Gradients:
    """Push an arbitrary logit gradient back through the network."""
    X = np.asarray(X, dtype=np.float64)
    _, pre, post = _forward_cache(model, X, mask)
    return _backprop_cached(model, pre, post, dlogits, mask)


def _backprop_cached(model, pre, post, delta, mask):
    n_layers = len(model.weights)
    gW = [None] * n_layers
    gb = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        gW[i] = post[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ model.weights[i].T
        if mask is not None:
            delta = delta * mask.masks[i - 1]
        h = _act(model.activation, pre[i - 1])
        delta = delta * _act_grad(model.activation, pre[i - 1], h)
    return Gradients(gW, gb)


def backward(model: MlpModel, X, y, mask: Optional[DropoutMask] = None):
    """Mean cross-entropy and its exact gradient under a fixed mask."""
    X = np.asarray(X, dtype=np.float64)
    logits, pre, post = _forward_cache(model, X, mask)
    y = _check_labels(y, X.shape[0], model.n_classes)
    loss, _ = softmax_ce(logits, y)
    grads = _backprop_cached(model, pre, post, ce_logit_grad(logits, y), mask)
    return loss, grads


def sample_mask(model: MlpModel, batch_rows: int, seed: int, rate: Optional[float] = None) -> DropoutMask:
    """Inverted-dropout mask; ``rate`` overrides the model's dropout rate."""
    d = model.dropout_rate if rate is None else rate
    if not 0.0 <= d < 1.0:
        raise InputError(f"dropout rate must be in [0, 1), got {d}")
    rng = np.random.default_rng(seed)
    scale = 1.0 / (1.0 - d)
    masks = []
    for width in model.hidden_sizes:
        keep = rng.random((batch_rows, width)) < 1.0 - d
        masks.append(keep * scale)
    return DropoutMask(masks, seed)


# -- optimizers ---------------------------------------------------------------


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-2
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    step: int = 0
    buffers: dict = field(default_factory=dict)


def opt_step(model: MlpModel, grads: Gradients, state: Optional[OptimizerState], config: OptimizerConfig):
    """Apply one update; returns ``(new_model, new_state)`` and leaves inputs untouched."""
    params = model.weights + model.biases
    gs = grads.weights + grads.biases
    if len(params) != len(gs) or any(p.shape != g.shape for p, g in zip(params, gs)):
        raise ShapeError("gradient shapes do not mirror the model")
    for g in gs:
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient entry; step aborted")
    state = OptimizerState() if state is None else state
    t = state.step + 1
    buffers = {}
    new = []
    if config.name == "sgd":
        for i, (p, g) in enumerate(zip(params, gs)):
            if config.momentum:
                v = config.momentum * state.buffers.get(("v", i), 0.0) + g
                buffers[("v", i)] = v
                g = v
            new.append(p - config.lr * g)
    elif config.name == "adam":
        b1, b2 = config.beta1, config.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for i, (p, g) in enumerate(zip(params, gs)):
            m = b1 * state.buffers.get(("m", i), 0.0) + (1.0 - b1) * g
            v = b2 * state.buffers.get(("v", i), 0.0) + (1.0 - b2) * g * g
            buffers[("m", i)] = m
            buffers[("v", i)] = v
            new.append(p - config.lr * (m / c1) / (np.sqrt(v / c2) + config.eps))
    else:
        raise InputError(f"unknown optimizer {config.name!r}")
    n = len(model.weights)
    out = MlpModel(new[:n], new[n:], model.activation, model.dropout_rate)
    return out, OptimizerState(t, buffers)
