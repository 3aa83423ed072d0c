import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simprov import nn
from simprov.base import (
    TrainConfig,
    fit_domains,
    irm_penalty,
    irm_penalty_from_logits,
    risk_report,
    train_base,
    train_erm,
    train_groupdro,
    train_irm,
)
from simprov.errors import InputError


def scaled_ce(logits, y, w):
    return nn.softmax_ce(w * logits, y)[0]


def penalty_oracle(logits, y, h=1e-5):
    """Squared central difference of the scaled risk in the dummy weight."""
    g = (scaled_ce(logits, y, 1 + h) - scaled_ce(logits, y, 1 - h)) / (2 * h)
    return g * g


def toy_domains(seed=0, n=60, shift=0.0):
    rng = np.random.default_rng(seed)
    out = []
    for e in range(2):
        y = rng.integers(0, 2, size=n)
        X = rng.normal(size=(n, 3)) + (2 * y - 1)[:, None] * (1.0 + shift * e)
        out.append((X, y))
    return out


def assert_models_identical(a, b):
    for x, y in zip(a.weights + a.biases, b.weights + b.biases):
        assert x.tobytes() == y.tobytes()


# -- penalty ------------------------------------------------------------------


def test_penalty_vanishes_at_zero_logits():
    assert irm_penalty_from_logits(np.zeros((4, 2)), np.array([0, 1, 1, 0]))[0] == 0.0


def test_penalty_matches_finite_difference_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n, k = int(rng.integers(1, 12)), int(rng.integers(2, 5))
        logits = rng.normal(scale=2.0, size=(n, k))
        y = rng.integers(0, k, size=n)
        pen, _ = irm_penalty_from_logits(logits, y)
        assert abs(pen - penalty_oracle(logits, y)) <= 1e-6


def test_penalty_logit_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 3))
    y = rng.integers(0, 3, size=5)
    _, grad = irm_penalty_from_logits(logits, y)
    eps = 1e-6
    num = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += eps
        down[idx] -= eps
        num[idx] = (irm_penalty_from_logits(up, y)[0] - irm_penalty_from_logits(down, y)[0]) / (2 * eps)
    np.testing.assert_allclose(grad, num, rtol=1e-5, atol=1e-9)


def test_model_penalty_uses_forward_logits():
    model = nn.init_mlp((3, 4, 2), seed=0)
    X = np.random.default_rng(0).normal(size=(6, 3))
    y = np.array([0, 1, 0, 1, 1, 0])
    assert irm_penalty(model, X, y) == irm_penalty_from_logits(nn.forward(model, X), y)[0]


# -- reductions ---------------------------------------------------------------


def test_irm_without_penalty_is_erm():
    train = toy_domains()
    cfg = TrainConfig(lam=0.0, epochs=20, seed=3)
    assert_models_identical(train_irm(train, cfg), train_erm(train, cfg))


def test_single_domain_irm_without_penalty_is_erm():
    train = toy_domains()[:1]
    cfg = TrainConfig(lam=0.0, epochs=15, seed=4, batch_size=16)
    assert_models_identical(train_irm(train, cfg), train_erm(train, cfg))


def test_irm_rejects_single_domain_with_penalty():
    with pytest.raises(InputError):
        train_irm(toy_domains()[:1], TrainConfig(epochs=1))


def test_groupdro_without_step_size_is_erm():
    train = toy_domains()
    cfg = TrainConfig(dro_eta=0.0, epochs=20, seed=5)
    assert_models_identical(train_groupdro(train, cfg), train_erm(train, cfg))


def test_zero_epochs_returns_initial_model():
    train = toy_domains()
    cfg = TrainConfig(epochs=0, seed=9)
    ref = nn.init_mlp(
        (3, 32, 32, 2),
        int(np.random.SeedSequence(9).spawn(2)[0].generate_state(1)[0]),
        "relu",
        0.2,
    )
    for method in ("erm", "irm", "groupdro"):
        assert_models_identical(train_base(method, train, cfg), ref)


def test_training_is_deterministic():
    train = toy_domains()
    cfg = TrainConfig(epochs=10, seed=1, batch_size=20)
    assert_models_identical(train_irm(train, cfg), train_irm(train, cfg))


def test_unknown_method_is_rejected():
    with pytest.raises(InputError):
        train_base("vrex", toy_domains(), TrainConfig(epochs=1))


# -- reports ------------------------------------------------------------------


def test_report_total_is_risk_plus_weighted_penalty():
    train = toy_domains()
    res = fit_domains(train, TrainConfig(epochs=8, lam=50.0, penalty_warmup=2), "irm", record=True)
    assert len(res.reports) == 8
    for r in res.reports:
        assert abs(r.total - (sum(r.risks) + r.lam * sum(r.penalties))) <= 1e-12
    assert [r.lam for r in res.reports[:3]] == [1.0, 1.0, 50.0]


def test_eval_report_identity():
    model = nn.init_mlp((3, 4, 2), seed=0)
    r = risk_report(model, toy_domains(), lam=7.0)
    assert abs(r.total - (sum(r.risks) + 7.0 * sum(r.penalties))) <= 1e-12


# -- GroupDRO -----------------------------------------------------------------


def test_groupdro_weights_stay_uniform_on_identical_domains():
    X, y = toy_domains()[0]
    res = fit_domains([(X, y), (X.copy(), y.copy())], TrainConfig(epochs=10, dropout=0.0), "groupdro", record=True)
    for q in res.group_weights:
        np.testing.assert_allclose(q, [0.5, 0.5], atol=1e-12)


def test_groupdro_upweights_high_loss_domain():
    X, y = toy_domains()[0]
    # flipping labels makes the second domain far harder
    res = fit_domains(
        [(X, y), (X, 1 - y)], TrainConfig(epochs=30, dropout=0.0, dro_eta=0.1), "groupdro", record=True
    )
    assert res.reports[-1].risks[1] > res.reports[-1].risks[0]
    assert res.group_weights[-1][1] > res.group_weights[-1][0]


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 1000))
def test_groupdro_weights_stay_on_simplex(eta, seed):
    res = fit_domains(
        toy_domains(seed, n=20, shift=1.0), TrainConfig(epochs=5, dro_eta=eta, seed=seed), "groupdro", record=True
    )
    for q in res.group_weights:
        assert np.all(q >= 0)
        assert abs(q.sum() - 1.0) <= 1e-12


# -- learning -----------------------------------------------------------------


@pytest.mark.parametrize("method", ["erm", "irm", "groupdro"])
def test_separable_data_is_learned(method):
    rng = np.random.default_rng(0)
    train = []
    for _ in range(2):
        y = rng.integers(0, 2, size=200)
        X = rng.normal(scale=0.3, size=(200, 4)) + (2 * y - 1)[:, None] * 2.0
        train.append((X, y))
    model = train_base(method, train, TrainConfig(epochs=100, lam=10.0))
    X, y = np.vstack([d[0] for d in train]), np.concatenate([d[1] for d in train])
    assert nn.accuracy(model, X, y) >= 0.99


def test_config_validation():
    with pytest.raises(InputError):
        TrainConfig(lr=0)
    with pytest.raises(InputError):
        TrainConfig(lam=-1)
