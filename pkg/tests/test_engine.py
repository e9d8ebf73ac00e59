import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from davt.core import Batch, ConfigError, Decision, EValue, MiniBatch, ScoreMode, Tag, TestConfig, WealthState
from davt.datasets import BlobParams, gen_blob, make_rng
from davt.engine import (
    EngineError,
    EngineState,
    PairedNull,
    RandomizedNull,
    SequentialTestSpec,
    UnpairedNull,
    batch_evalue_test,
    combine_evalues,
    compute_score,
    payoffs,
    run_oracle,
    run_sequential,
    split_halves,
    step,
    stopping_time,
    unpaired_score,
)
from davt.learner import (
    PayoffModel,
    TrainingParams,
    batch_objective,
    forward,
    init_model,
    train_model,
    zero_model,
)
from davt.operators import PROJECT_FIRST, PROJECT_SWAP, OperatorSet

Q = 0.45
NULL = PairedNull(PROJECT_SWAP, PROJECT_FIRST)
HALF = 2.0 * math.atanh(0.25 / Q)  # linear unit model maps +-HALF to +-0.25


def scalar_pairs(xs, ys):
    return Batch(np.stack([np.asarray(xs, float), np.asarray(ys, float)], axis=1)[:, :, None], Tag.PAIR)


def linear_model(w=1.0, b=0.0):
    return PayoffModel((1, 1), (np.array([[w]]),), (np.array([b]),))


def unit_model():
    return PayoffModel((1, 1, 1), (np.array([[1.0]]), np.array([[1.0]])), (np.zeros(1), np.zeros(1)))


def half_payoff_batch(b=2):
    return scalar_pairs([-HALF] * b, [HALF] * b)


def fixed_spec(model, **cfg):
    return SequentialTestSpec(TestConfig(**cfg), NULL, TrainingParams(max_epochs=0), model)


def blob_stream(seed, k, n=90, hypothesis="alt"):
    rng = make_rng(seed)
    return [gen_blob(n, BlobParams(hypothesis=hypothesis), rng) for _ in range(k)]


# -- scores ---------------------------------------------------------------------------


def test_zero_payoffs_score_one_in_both_modes():
    data = gen_blob(10, BlobParams(), make_rng(0))
    for mode in ScoreMode:
        assert compute_score(data, zero_model((2, 3, 1)), NULL, mode) == 1.0


def test_half_payoffs_product_and_average():
    batch = half_payoff_batch()
    assert compute_score(batch, linear_model(), NULL, ScoreMode.PRODUCT) == pytest.approx(2.25, abs=1e-12)
    assert compute_score(batch, linear_model(), NULL, ScoreMode.AVERAGE) == pytest.approx(1.5, abs=1e-12)


def test_symmetrized_batch_cancels_in_average_mode(rng):
    model = init_model((2, 6, 1), rng, layer_norm=True)
    base = rng.normal(size=(8, 2, 2))
    sym = np.empty((16, 2, 2))
    sym[0::2], sym[1::2] = base, base[:, ::-1]
    batch = Batch(sym, Tag.PAIR)
    assert compute_score(batch, model, NULL, ScoreMode.AVERAGE) == 1.0
    product = 1.0
    for z in batch.observations:
        product *= 1.0 + forward(model, z.data[1]) - forward(model, z.data[0])
    assert compute_score(batch, model, NULL, ScoreMode.PRODUCT) == pytest.approx(product, rel=1e-12)


@given(seed=st.integers(0, 2**32 - 1), b=st.integers(1, 40), mode=st.sampled_from(list(ScoreMode)))
@settings(max_examples=40, deadline=None)
def test_scores_stay_above_positivity_floor(seed, b, mode):
    rng = np.random.default_rng(seed)
    m = init_model((2, 5, 1), rng)
    m = m.with_params([p * 30 for p in m.params()])  # push payoffs towards +-2q
    s = compute_score(Batch(rng.normal(size=(b, 2, 2)) * 5, Tag.PAIR), m, NULL, mode)
    floor = (1 - 2 * Q) ** b if mode is ScoreMode.PRODUCT else 1 - 2 * Q
    assert s >= floor > 0


# -- stepping and stopping ------------------------------------------------------------


def _mini(batch, t):
    return MiniBatch(batch.data, batch.tag, batch.groups, index=t)


def test_constant_score_one_and_a_half_stops_at_eight():
    spec = fixed_spec(linear_model(), score_mode="average", t_max=30)
    rec = run_oracle([half_payoff_batch()] * 30, linear_model(), spec.config, NULL)
    assert rec.stopping_time == 8 and rec.decision is Decision.REJECT
    assert rec.samples_consumed == 16
    assert len(rec.trajectory) == 8


def test_constant_score_one_never_stops():
    spec = fixed_spec(zero_model((1, 1)), t_max=12)
    rec = run_sequential([half_payoff_batch()] * 12, spec)
    assert rec.decision is Decision.CONTINUE and rec.stopping_time is None
    assert [lw for _, lw in rec.trajectory] == [0.0] * 12
    assert rec.samples_consumed == 24


def test_first_score_two_and_a_quarter_at_half_alpha():
    spec = fixed_spec(linear_model(), alpha=0.5)
    assert run_sequential([half_payoff_batch()] * 3, spec).stopping_time == 1


def test_zero_model_under_null_keeps_unit_wealth():
    stream = blob_stream(1, 5, hypothesis="null")
    rec = run_oracle(stream, zero_model((2, 4, 1)), TestConfig(t_max=5), NULL)
    assert rec.decision is Decision.CONTINUE
    assert all(lw == 0.0 for _, lw in rec.trajectory)


def test_oracle_wealth_is_hand_computed_four_term_product():
    stream = [scalar_pairs([1.0, 0.5], [0.0, 2.0]), scalar_pairs([-1.0, 2.0], [3.0, 1.0])]
    rec = run_oracle(stream, unit_model(), TestConfig(t_max=2), NULL)
    # frozen from the pure-python oracle
    assert rec.trajectory[0][1] == pytest.approx(-0.0240863432207639, abs=1e-14)
    assert rec.trajectory[1][1] == pytest.approx(0.17284478101754688, abs=1e-14)


def test_wealth_update_invariant_each_step():
    spec = SequentialTestSpec(TestConfig(t_max=4), NULL, TrainingParams(max_epochs=30), init_model((2, 6, 1), make_rng(2)))
    state = EngineState.initial(spec)
    for t, batch in enumerate(blob_stream(3, 4), start=1):
        new = step(state, _mini(batch, t), spec)
        expected = state.wealth.log_wealth + math.log(new.wealth.last_score)
        assert new.wealth.log_wealth == pytest.approx(expected, rel=1e-12, abs=1e-15)
        assert len(new.accumulated) == t and len(new.diagnostics) == t
        state = new
        if state.wealth.stopped:
            break


def test_out_of_order_batch_is_rejected():
    spec = fixed_spec(zero_model((2, 2, 1)))
    batch = blob_stream(0, 1, n=4)[0]
    with pytest.raises(EngineError):
        step(EngineState.initial(spec), _mini(batch, 2), spec)


def test_stopped_state_refuses_further_steps():
    spec = fixed_spec(linear_model(), alpha=0.5)
    state = step(EngineState.initial(spec), _mini(half_payoff_batch(), 1), spec)
    assert state.wealth.stopped
    with pytest.raises(EngineError):
        step(state, _mini(half_payoff_batch(), 2), spec)


def test_no_retraining_after_stopping():
    m0 = linear_model()
    spec = SequentialTestSpec(TestConfig(alpha=0.5), NULL, TrainingParams(max_epochs=50), m0)
    state = EngineState(WealthState(t=2, log_wealth=0.6), m0, (half_payoff_batch(), half_payoff_batch()))
    new = step(state, _mini(half_payoff_batch(), 3), spec)
    assert new.wealth.stopped and new.model is m0


def test_empty_stream_is_an_error():
    with pytest.raises(EngineError):
        run_sequential([], fixed_spec(zero_model((2, 2, 1))))


def test_model_q_bound_must_match_config():
    with pytest.raises(ConfigError):
        SequentialTestSpec(TestConfig(q_bound=0.4), NULL, TrainingParams(), zero_model((2, 2, 1)))


@given(levels=st.lists(st.floats(-3, 3), min_size=1, max_size=30), a1=st.floats(0.001, 0.9), a2=st.floats(0.001, 0.9))
def test_stopping_time_monotone_in_alpha(levels, a1, a2):
    lo, hi = sorted((a1, a2))
    trajectory = list(np.cumsum(levels))
    t_lo, t_hi = stopping_time(trajectory, lo), stopping_time(trajectory, hi)
    if t_lo is not None:
        assert t_hi is not None and t_hi <= t_lo


# -- replay and predictability ------------------------------------------------------------


def _training_spec(t_max=5):
    m0 = init_model((2, 8, 8, 1), make_rng(10), layer_norm=True)
    return SequentialTestSpec(TestConfig(t_max=t_max), NULL, TrainingParams(max_epochs=40, patience=5), m0)


def test_matches_step_by_step_replay():
    spec = _training_spec()
    stream = blob_stream(11, 5)
    rec = run_sequential(stream, spec)
    # independent replay: score with the current model, then refit once two batches exist
    model, log_wealth, expected = spec.model_init, 0.0, []
    for t, batch in enumerate(stream, start=1):
        log_wealth += batch_objective(model, batch, PROJECT_SWAP, PROJECT_FIRST)
        expected.append(log_wealth)
        if log_wealth >= math.log(20):
            break
        if t >= 2:
            model = train_model(model, stream[:t], spec.training, PROJECT_SWAP, PROJECT_FIRST).model
    assert [lw for _, lw in rec.trajectory] == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_predictability_under_future_perturbation():
    spec = _training_spec()
    stream = blob_stream(12, 5)
    base = run_sequential(stream, spec)
    t = 3
    noisy = stream[:t] + blob_stream(99, 2, hypothesis="null")
    changed = run_sequential(noisy, spec)
    assert [d[1] for d in changed.diagnostics[:t]] == [d[1] for d in base.diagnostics[:t]]


def test_singleton_randomized_null_is_bit_identical():
    spec = _training_spec(t_max=4)
    stream = blob_stream(13, 4)
    plain = run_sequential(stream, spec)
    randomized = run_sequential(
        stream,
        SequentialTestSpec(spec.config, RandomizedNull(OperatorSet([PROJECT_SWAP]), OperatorSet([PROJECT_FIRST])), spec.training, spec.model_init),
    )
    assert plain == randomized


def test_diagnostics_record_growth_threshold():
    rec = run_sequential(blob_stream(14, 3), _training_spec(t_max=3))
    assert [d[0] for d in rec.diagnostics] == [1, 2, 3]
    assert all(d[3] > 0 for d in rec.diagnostics)


# -- batch e-value test -----------------------------------------------------------------


def test_batch_evalue_with_training_disabled_is_one():
    data = gen_blob(40, BlobParams(hypothesis="alt"), make_rng(5))
    e, decision = batch_evalue_test(data, fixed_spec(zero_model((2, 4, 1))), alpha=0.05)
    assert e.value == 1.0 and decision is Decision.CONTINUE


def test_batch_evalue_two_points_hand_value():
    data = scalar_pairs([1.0, 0.5], [0.0, 2.0])
    e, _ = batch_evalue_test(data, fixed_spec(unit_model()))
    # frozen from the pure-python oracle: only the second pair is scored
    assert e.value == pytest.approx(1.232503972098425, abs=1e-14)


def test_batch_evalue_split_and_errors():
    d1, d2 = split_halves(scalar_pairs(range(5), range(5)))
    assert (len(d1), len(d2)) == (3, 2)
    with pytest.raises(EngineError):
        batch_evalue_test(scalar_pairs([1.0], [0.0]), fixed_spec(unit_model()))


def test_combine_evalues():
    assert combine_evalues(EValue(1.0), EValue(3.5)).value == 3.5
    assert combine_evalues(EValue(2.0), EValue(3.0)).value == 6.0


# -- unpaired scores ----------------------------------------------------------------------


def test_unpaired_saturated_model_gives_one_point_nine():
    model = linear_model(w=1e4)
    xs = Batch(np.ones((3, 1)), Tag.PLAIN)
    ys = Batch(-np.ones((5, 1)), Tag.PLAIN)
    assert unpaired_score(xs, ys, model) == pytest.approx(1.9, abs=1e-14)


def test_unpaired_identical_groups_score_one(rng):
    model = init_model((3, 4, 1), rng)
    x = Batch(rng.normal(size=(6, 3)), Tag.PLAIN)
    for mode in ("mean-difference", "sigma-difference"):
        assert unpaired_score(x, x, model, mode) == 1.0


def test_unpaired_matches_direct_recomputation(rng):
    model = init_model((2, 5, 1), rng)
    xs, ys = rng.normal(size=(4, 2)), rng.normal(size=(7, 2)) + 1
    gx = [forward(model, x) for x in xs]
    gy = [forward(model, y) for y in ys]
    bx, by = Batch(xs, Tag.PLAIN), Batch(ys, Tag.PLAIN)
    assert unpaired_score(bx, by, model) == pytest.approx(1 + sum(gx) / 4 - sum(gy) / 7, rel=1e-13)
    direct = 1 + Q * math.tanh(sum(gx) - sum(gy))
    assert unpaired_score(bx, by, model, "sigma-difference") == pytest.approx(direct, rel=1e-13)


def test_unpaired_null_runs_sequentially():
    rng = make_rng(6)
    stream = []
    for _ in range(3):
        data = np.concatenate([rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) + 2.0])
        stream.append(Batch(data, Tag.PLAIN, groups=np.array([1] * 20 + [-1] * 20)))
    spec = SequentialTestSpec(TestConfig(t_max=3), UnpairedNull(), TrainingParams(max_epochs=40), init_model((2, 8, 1), make_rng(7)))
    rec = run_sequential(stream, spec)
    assert len(rec.trajectory) >= 1
    with pytest.raises(EngineError):
        payoffs(stream[0], spec.model_init, UnpairedNull())
