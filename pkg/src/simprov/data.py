"""Synthetic colored-MNIST analog with an invariant and a spurious channel.

Each sample has a latent "digit" bit ``z``. The label is ``z`` flipped with
probability ``label_noise``; the "color" bit ``c`` is the label flipped with the
domain's ``spur_flip_prob``. Both bits are embedded as Gaussian blobs
(``x_inv`` from ``z``, ``x_spur`` from ``c``). Training domains share a strong
color-label correlation that reverses in the target domain.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .errors import DatasetParseError, InputError


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    n_samples: int = 2000
    spur_flip_prob: float = 0.1
    label_noise: float = 0.25
    d_inv: int = 5
    d_spur: int = 5
    signal_mean: float = 1.0
    noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("spur_flip_prob", "label_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{name} must be a probability, got {v}")
        if self.d_inv < 1 or self.d_spur < 1:
            raise InputError("d_inv and d_spur must be >= 1")
        if self.n_samples < 0:
            raise InputError("n_samples must be >= 0")
        if self.noise_sigma < 0:
            raise InputError("noise_sigma must be >= 0")

    @property
    def n_features(self) -> int:
        return self.d_inv + self.d_spur


class Sample(NamedTuple):
    x: np.ndarray
    y: int
    domain_id: str


@dataclass
class DomainDataset:
    spec: DomainSpec
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, self.spec.n_features)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise InputError(f"{len(self.X)} feature rows but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    @property
    def domain_id(self) -> str:
        return self.spec.domain_id

    @property
    def samples(self) -> Iterator[Sample]:
        for x, y in zip(self.X, self.y):
            yield Sample(x, int(y), self.spec.domain_id)

    @property
    def spurious_bits(self) -> np.ndarray:
        """Sign of the mean spurious coordinate, as a 0/1 "color"."""
        return (self.X[:, self.spec.d_inv:].mean(axis=1) > 0).astype(np.int64)

    @property
    def invariant_bits(self) -> np.ndarray:
        return (self.X[:, : self.spec.d_inv].mean(axis=1) > 0).astype(np.int64)


def generate_domain(spec: DomainSpec) -> DomainDataset:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    z = rng.integers(0, 2, size=n)
    y = z ^ (rng.random(n) < spec.label_noise)
    c = y ^ (rng.random(n) < spec.spur_flip_prob)
    mu, sigma = spec.signal_mean, spec.noise_sigma
    x_inv = (2 * z - 1)[:, None] * mu + sigma * rng.standard_normal((n, spec.d_inv))
    x_spur = (2 * c - 1)[:, None] * mu + sigma * rng.standard_normal((n, spec.d_spur))
    return DomainDataset(spec, np.hstack([x_inv, x_spur]), y.astype(np.int64))


@dataclass
class Benchmark:
    train: list
    target: DomainDataset
    target_eval: DomainDataset

    @property
    def all(self) -> list:
        return [*self.train, self.target, self.target_eval]


TRAIN_FLIP_PROBS = (0.1, 0.2)
TARGET_FLIP_PROB = 0.9
# one weak invariant coordinate against a wide color block: the color is far
# easier to fit, which is what makes short-trained students latch onto it
BENCHMARK_DOMAIN = {"d_inv": 1, "d_spur": 10}


def benchmark_specs(
    seed: int = 0,
    train_flip_probs=TRAIN_FLIP_PROBS,
    target_flip_prob: float = TARGET_FLIP_PROB,
    **overrides,
) -> list:
    """Specs for the training domains, the target and its evaluation split, in that order.

    ``overrides`` update :data:`BENCHMARK_DOMAIN` and apply to every domain.
    """
    overrides = {**BENCHMARK_DOMAIN, **overrides}
    n_train = len(train_flip_probs)
    if n_train < 1:
        raise InputError("need at least one training domain")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_train + 2)]
    specs = [
        DomainSpec(f"train_{i}", spur_flip_prob=p, seed=seeds[i], **overrides)
        for i, p in enumerate(train_flip_probs)
    ]
    target = DomainSpec("target", spur_flip_prob=target_flip_prob, seed=seeds[n_train], **overrides)
    return specs + [target, replace(target, domain_id="target_eval", seed=seeds[n_train + 1])]


def default_benchmark(
    seed: int = 0,
    train_flip_probs=TRAIN_FLIP_PROBS,
    target_flip_prob: float = TARGET_FLIP_PROB,
    **overrides,
) -> Benchmark:
    """Two training domains (color flip 0.1, 0.2), a target domain (0.9) and
    a labeled evaluation split of the target distribution.

    ``overrides`` are applied to every DomainSpec (e.g. ``n_samples=500``).
    Per-domain seeds are spawned from ``seed`` so the draws are independent.
    """
    *train_specs, target, target_eval = benchmark_specs(seed, train_flip_probs, target_flip_prob, **overrides)
    return Benchmark(
        [generate_domain(s) for s in train_specs],
        generate_domain(target),
        generate_domain(target_eval),
    )


def pool(datasets) -> tuple:
    """Stack features and labels of several domains."""
    datasets = list(datasets)
    if not datasets:
        raise InputError("no datasets to pool")
    return (
        np.vstack([d.X for d in datasets]),
        np.concatenate([d.y for d in datasets]),
    )


# -- CSV persistence ----------------------------------------------------------

_SPEC_PREFIX = "# spec: "
_SEED_PREFIX = "# seed: "


def save_csv(ds: DomainDataset, path) -> None:
    spec = asdict(ds.spec)
    seed = spec.pop("seed")
    header = ["domain_id", "y"] + [f"x_{i}" for i in range(ds.spec.n_features)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(_SPEC_PREFIX + json.dumps(spec, sort_keys=True) + "\n")
        fh.write(_SEED_PREFIX + str(seed) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for x, y in zip(ds.X, ds.y):
            writer.writerow([ds.spec.domain_id, int(y)] + ["%.17g" % v for v in x])


def load_csv(path) -> DomainDataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    spec_kwargs, seed = None, 0
    first_data = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.startswith("#"):
            first_data = lineno
            break
        try:
            if line.startswith(_SPEC_PREFIX):
                spec_kwargs = json.loads(line[len(_SPEC_PREFIX):])
            elif line.startswith(_SEED_PREFIX):
                seed = int(line[len(_SEED_PREFIX):])
        except ValueError as exc:
            raise DatasetParseError(f"bad metadata line: {exc}", lineno) from None
    else:
        first_data = len(lines) + 1
    if spec_kwargs is None:
        raise DatasetParseError("missing '# spec:' metadata line", 1)
    try:
        spec = DomainSpec(seed=seed, **spec_kwargs)
    except TypeError as exc:
        raise DatasetParseError(f"bad spec metadata: {exc}", 1) from None

    rows = list(csv.reader(lines[first_data - 1:]))
    if not rows:
        raise DatasetParseError("missing column header", first_data)
    expected = ["domain_id", "y"] + [f"x_{i}" for i in range(spec.n_features)]
    if rows[0] != expected:
        raise DatasetParseError(f"header {rows[0]} does not match spec", first_data)

    n = len(rows) - 1
    X = np.empty((n, spec.n_features))
    y = np.empty(n, dtype=np.int64)
    for i, row in enumerate(rows[1:]):
        lineno = first_data + 1 + i
        if len(row) != len(expected):
            raise DatasetParseError(f"expected {len(expected)} columns, got {len(row)}", lineno)
        if row[0] != spec.domain_id:
            raise DatasetParseError(f"domain_id {row[0]!r} != {spec.domain_id!r}", lineno)
        try:
            y[i] = int(row[1])
            X[i] = [float(v) for v in row[2:]]
        except ValueError as exc:
            raise DatasetParseError(str(exc), lineno) from None
        if y[i] not in (0, 1):
            raise DatasetParseError(f"label {y[i]} not in {{0, 1}}", lineno)
        if not np.all(np.isfinite(X[i])):
            raise DatasetParseError("non-finite feature value", lineno)
    return DomainDataset(spec, X, y)
