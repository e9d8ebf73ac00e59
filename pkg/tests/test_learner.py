import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from davt.core import Batch, ConfigError, Observation, Tag
from davt.datasets import BlobParams, gen_blob, make_rng
from davt.learner import (
    AdamState,
    GradientBundle,
    PayoffModel,
    TrainingParams,
    adam_step,
    batch_objective,
    forward,
    forward_rows,
    growth_constant,
    growth_rate_estimate,
    growth_threshold,
    init_model,
    model_from_bytes,
    model_to_bytes,
    objective_gradient,
    operator_objective,
    regularization,
    regularized_objective_and_gradient,
    train_model,
    zero_model,
)
from davt.operators import IDENTITY, PROJECT_FIRST, PROJECT_SWAP, SWAP

Q = 0.45


def scalar_pairs(xs, ys):
    return Batch(np.stack([np.asarray(xs, float), np.asarray(ys, float)], axis=1)[:, :, None], Tag.PAIR)


def linear_model(w=1.0, b=0.0):
    """No hidden layer: g(x) = q tanh((w x + b) / 2)."""
    return PayoffModel((1, 1), (np.array([[w]]),), (np.array([b]),))


def unit_model():
    """One hidden ReLU unit with unit weights: g(x) = q tanh(relu(x) / 2)."""
    return PayoffModel((1, 1, 1), (np.array([[1.0]]), np.array([[1.0]])), (np.zeros(1), np.zeros(1)))


# -- forward ---------------------------------------------------------------------------


def test_zero_model_outputs_zero():
    m = zero_model((5, 7, 1), layer_norm=True)
    assert forward(m, np.arange(5.0)) == 0.0


def test_hand_set_forward_pass():
    m = PayoffModel(
        (2, 1, 1),
        (np.array([[0.5], [-1.0]]), np.array([[2.0]])),
        (np.array([0.25]), np.array([0.1])),
    )
    # frozen from the pure-python oracle: q * (2 logistic(0.6) - 1)
    assert forward(m, np.array([1.0, 0.5])) == pytest.approx(0.13109067560321586, abs=1e-15)


def test_output_strictly_inside_bound(rng):
    for _ in range(100):
        m = init_model((3, 8, 8, 1), rng, layer_norm=bool(rng.integers(2)))
        big = m.with_params([p * rng.uniform(1, 50) for p in m.params()])
        x = rng.normal(size=(100, 3)) * 10 ** rng.uniform(-2, 3)
        assert np.all(np.abs(forward_rows(big, x)) < Q)


def test_forward_rejects_wrong_width():
    with pytest.raises(ConfigError):
        forward(zero_model((3, 2, 1)), np.zeros(4))


def test_model_validation():
    with pytest.raises(ConfigError):
        PayoffModel((2, 1), (np.zeros((2, 1)),), (np.zeros(1),), q_bound=0.5)
    with pytest.raises(ValueError):
        PayoffModel((1, 1), (np.array([[np.inf]]),), (np.zeros(1),))


# -- objective -----------------------------------------------------------------------


def test_zero_model_objective_is_zero(rng):
    data = gen_blob(20, BlobParams(), make_rng(1))
    assert batch_objective(zero_model((2, 4, 1)), data, PROJECT_SWAP, PROJECT_FIRST) == 0.0


def test_half_payoff_gives_log_one_and_a_half():
    r = 2.0 * math.atanh(0.25 / Q)  # g(r) = 0.25, g(-r) = -0.25
    data = scalar_pairs([-r], [r])
    value = batch_objective(linear_model(), data, PROJECT_SWAP, PROJECT_FIRST)
    assert value == pytest.approx(0.4054651081081644, abs=1e-12)


def test_objective_matches_term_by_term_loop(rng):
    m = init_model((2, 6, 6, 1), rng, layer_norm=True)
    data = gen_blob(8, BlobParams(hypothesis="alt"), make_rng(3))
    loop = sum(
        math.log(1.0 + forward(m, z.data[1]) - forward(m, z.data[0])) for z in data.observations
    )
    assert batch_objective(m, data, PROJECT_SWAP, PROJECT_FIRST) == pytest.approx(loop, abs=1e-12)
    as_list = batch_objective(m, data.observations, PROJECT_SWAP, PROJECT_FIRST)
    assert as_list == batch_objective(m, data, PROJECT_SWAP, PROJECT_FIRST)


def test_sigma_variant_uses_raw_score_difference():
    m = linear_model(w=0.7, b=0.2)
    xs, ys = np.array([0.3, -1.0, 2.0]), np.array([1.1, 0.4, -0.5])
    expected = sum(math.log1p(Q * math.tanh(0.7 * y - 0.7 * x)) for x, y in zip(xs, ys))
    got = batch_objective(m, scalar_pairs(xs, ys), PROJECT_SWAP, PROJECT_FIRST, "sigma")
    assert got == pytest.approx(expected, abs=1e-13)


def test_empty_data_has_zero_gradient():
    m = init_model((2, 3, 1), np.random.default_rng(0))
    g = objective_gradient(m, [], PROJECT_SWAP, PROJECT_FIRST)
    assert all(np.all(a == 0) for a in g.arrays)
    assert [a.shape for a in g.arrays] == [p.shape for p in m.params()]


def test_regularized_objective_is_termwise(rng):
    m = init_model((2, 5, 1), rng)
    data = gen_blob(10, BlobParams(), make_rng(2))
    base = batch_objective(m, data, PROJECT_SWAP, PROJECT_FIRST)
    l1_term = 0.03 * sum(np.abs(w).sum() for w in m.weights)
    l2_term = 0.02 * sum((w * w).sum() for w in m.weights)
    value, _ = regularized_objective_and_gradient(m, data, PROJECT_SWAP, PROJECT_FIRST, "plain", 0.03, 0.02)
    assert value == pytest.approx(base - l1_term - l2_term, abs=1e-12)
    assert regularization(m, 0.03, 0.02) == pytest.approx(l1_term + l2_term, abs=1e-14)


def _fd_check(model, data, t1, t2, variant, l1, l2, h=1e-5):
    _, grad = regularized_objective_and_gradient(model, data, t1, t2, variant, l1, l2)
    params = model.params()
    worst = 0.0
    for i, p in enumerate(params):
        for idx in np.ndindex(p.shape):
            vals = []
            for step in (h, -h):
                moved = [a.copy() for a in params]
                moved[i][idx] += step
                vals.append(regularized_objective_and_gradient(model.with_params(moved), data, t1, t2, variant, l1, l2)[0])
            fd = (vals[0] - vals[1]) / (2 * h)
            err = abs(grad.arrays[i][idx] - fd) / (1e-7 + 1e-4 * abs(fd))
            worst = max(worst, err)
    return worst


@given(
    seed=st.integers(0, 2**32 - 1),
    variant=st.sampled_from(["plain", "sigma"]),
    layer_norm=st.booleans(),
    l1=st.sampled_from([0.0, 0.01]),
    l2=st.sampled_from([0.0, 0.01]),
)
@settings(max_examples=12, deadline=None)
def test_gradient_matches_finite_differences(seed, variant, layer_norm, l1, l2):
    rng = np.random.default_rng(seed)
    m = init_model((2, 4, 3, 1), rng, layer_norm=layer_norm)
    data = Batch(rng.normal(size=(6, 2, 2)) * 2, Tag.PAIR)
    assert _fd_check(m, data, PROJECT_SWAP, PROJECT_FIRST, variant, l1, l2) <= 1.0


def test_zero_model_output_bias_gradient_by_hand():
    # g = q tanh(raw / 2); at raw = 0 dg/db_out = q / 2 for every input, so the
    # payoff difference and its gradient w.r.t. the output bias vanish exactly
    m = zero_model((2, 3, 1))
    data = gen_blob(5, BlobParams(), make_rng(4))
    g = objective_gradient(m, data, PROJECT_SWAP, PROJECT_FIRST)
    assert g.arrays[len(m.weights) + len(m.biases) - 1][0] == 0.0
    assert _fd_check(m, data, PROJECT_SWAP, PROJECT_FIRST, "plain", 0.0, 0.0) <= 1.0


# -- optimiser ---------------------------------------------------------------------------


def _ones_model():
    return PayoffModel((1, 1), (np.array([[1.0]]),), (np.array([1.0]),))


def test_adam_zero_gradient_keeps_parameters():
    m = _ones_model()
    out, _ = adam_step(m, GradientBundle.zeros_like(m), AdamState.for_model(m), 0.01)
    assert all(np.array_equal(a, b) for a, b in zip(out.params(), m.params()))


def test_adam_first_two_steps_match_scalar_recurrence():
    m = _ones_model()
    g = GradientBundle(tuple(np.full_like(p, 0.3) for p in m.params()))
    s = AdamState.for_model(m)
    m1, s = adam_step(m, g, s, 0.01)
    # frozen from the scalar oracle: ascent moves each parameter by ~lr per step
    assert m1.weights[0][0, 0] == pytest.approx(1.0099999996666666, abs=1e-15)
    m2, s = adam_step(m1, g, s, 0.01)
    assert m2.biases[0][0] == pytest.approx(1.0199999993333333, abs=1e-15)
    assert s.step == 2


# -- training ------------------------------------------------------------------------------


def _blob_batches(k, hypothesis="alt", seed=5):
    rng = make_rng(seed)
    return [gen_blob(90, BlobParams(hypothesis=hypothesis), rng) for _ in range(k)]


def test_training_does_not_lower_the_training_objective():
    batches = _blob_batches(2)
    m0 = init_model((2, 30, 30, 1), make_rng(6), layer_norm=True)
    out = train_model(m0, batches, TrainingParams(), PROJECT_SWAP, PROJECT_FIRST)
    before = batch_objective(m0, batches[:1], PROJECT_SWAP, PROJECT_FIRST)
    after = batch_objective(out.model, batches[:1], PROJECT_SWAP, PROJECT_FIRST)
    assert after >= before


def test_zero_epochs_returns_model_unchanged():
    m0 = init_model((2, 4, 1), make_rng(6))
    out = train_model(m0, _blob_batches(2), TrainingParams(max_epochs=0), PROJECT_SWAP, PROJECT_FIRST)
    assert out.model is m0 and out.epochs_run == 0


def test_identical_operators_only_regularization_moves_weights():
    batches = _blob_batches(3)
    m0 = init_model((4, 5, 1), make_rng(7))
    plain = train_model(m0, batches, TrainingParams(max_epochs=20, patience=20), SWAP, SWAP)
    assert all(np.allclose(a, b, rtol=0, atol=1e-8) for a, b in zip(plain.model.params(), m0.params()))
    # the validation objective is flat, so keep every epoch's snapshot by training on one batch
    reg = train_model(m0, batches[:1], TrainingParams(max_epochs=20, patience=20, l2_coeff=0.1), SWAP, SWAP)
    assert batch_objective(reg.model, batches, SWAP, SWAP) == 0.0
    # payoff terms cancel only up to rounding, so biases may drift by ~1e-10
    assert all(np.allclose(a, b, rtol=0, atol=1e-8) for a, b in zip(reg.model.biases, m0.biases))
    assert sum((w * w).sum() for w in reg.model.weights) < sum((w * w).sum() for w in m0.weights)


@given(seed=st.integers(0, 1000), k=st.integers(2, 4))
@settings(max_examples=6, deadline=None)
def test_early_stopping_returns_best_validation_snapshot(seed, k):
    batches = _blob_batches(k, seed=seed)
    m0 = init_model((2, 8, 1), make_rng(seed + 1), layer_norm=True)
    out = train_model(m0, batches, TrainingParams(max_epochs=60, patience=5, learning_rate=5e-3), PROJECT_SWAP, PROJECT_FIRST)
    hist = out.validation_history
    assert hist[out.best_epoch] >= max(hist[out.best_epoch:])
    val = batch_objective(out.model, batches[-1:], PROJECT_SWAP, PROJECT_FIRST)
    assert val == hist[out.best_epoch]


def test_training_is_deterministic():
    batches = _blob_batches(3)
    m0 = init_model((2, 10, 1), make_rng(8), layer_norm=True)
    a = train_model(m0, batches, TrainingParams(), PROJECT_SWAP, PROJECT_FIRST).model
    b = train_model(m0, batches, TrainingParams(), PROJECT_SWAP, PROJECT_FIRST).model
    assert model_to_bytes(a) == model_to_bytes(b)


def test_divergence_restores_last_finite_snapshot(caplog):
    m0 = init_model((2, 3, 1), make_rng(9))
    base = operator_objective(PROJECT_SWAP, PROJECT_FIRST)
    calls = {"n": 0}

    def flaky(model, batches, need_grad=True):
        value, grad = base(model, batches, need_grad)
        if need_grad:
            calls["n"] += 1
            if calls["n"] == 4:
                return math.nan, grad
        return value, grad

    out = train_model(m0, _blob_batches(1), TrainingParams(max_epochs=10, patience=10), objective=flaky)
    assert out.diverged and out.epochs_run == 4
    assert all(np.all(np.isfinite(p)) for p in out.model.params())
    assert "diverged" in caplog.text


def test_training_params_validation():
    with pytest.raises(ConfigError):
        TrainingParams(patience=20, max_epochs=10)
    with pytest.raises(ConfigError):
        TrainingParams(loss_variant="hinge")
    with pytest.raises(ConfigError):
        TrainingParams(l1_coeff=-0.1)


# -- diagnostics and serialization -------------------------------------------------------


def test_growth_constant_at_default_bound():
    assert growth_constant(0.45) == pytest.approx(4.605170185988092, abs=1e-12)
    n = 90 * 3
    assert growth_threshold(0.45, n) == pytest.approx(2 * 4.605170185988092 * math.sqrt(math.log(n) / n), rel=1e-14)


def test_growth_estimate_zero_model_and_direct_mean():
    data = scalar_pairs([1.0, 0.5], [0.0, 2.0])
    assert growth_rate_estimate(zero_model((1, 2, 1)), data, PROJECT_SWAP, PROJECT_FIRST).estimate == 0.0
    m = unit_model()
    g = lambda x: Q * math.tanh(max(x, 0.0) / 2)  # noqa: E731
    direct = (math.log1p(g(0.0) - g(1.0)) + math.log1p(g(2.0) - g(0.5))) / 2
    diag = growth_rate_estimate(m, data, PROJECT_SWAP, PROJECT_FIRST, n_seen=180)
    assert diag.estimate == pytest.approx(direct, abs=1e-15)
    assert diag.threshold == growth_threshold(Q, 180)


def test_model_bytes_roundtrip(rng):
    m = init_model((3, 4, 2, 1), rng, layer_norm=True)
    blob = model_to_bytes(m)
    back = model_from_bytes(blob)
    assert model_to_bytes(back) == blob
    assert all(np.array_equal(a, b) for a, b in zip(back.params(), m.params()))
    with pytest.raises(ValueError):
        model_from_bytes(blob[:-8])


def test_observation_input_to_forward():
    m = linear_model(w=2.0)
    assert forward(m, Observation(np.array([0.0]), Tag.PLAIN)) == 0.0
    assert forward_rows(m, np.array([[1.0]]))[0] == pytest.approx(Q * math.tanh(1.0), abs=1e-15)


def test_swap_identity_gradient_runs_on_pairs(rng):
    m = init_model((4, 3, 1), rng)
    data = Batch(rng.normal(size=(4, 2, 2)), Tag.PAIR)
    assert _fd_check(m, data, SWAP, IDENTITY, "plain", 0.0, 0.0) <= 1.0
