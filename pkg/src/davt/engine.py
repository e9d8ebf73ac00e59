"""Sequential betting test, oracle test, batch e-value test and score variants.

Round t scores B_t with the model trained on B_1..B_{t-1}, multiplies the
wealth by that score, checks the 1/alpha threshold and only then retrains on
the enlarged data set. Wealth is tracked in log space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, Union

import numpy as np

from .core import (
    Batch,
    ConfigError,
    Decision,
    EValue,
    MiniBatch,
    ScoreMode,
    Tag,
    TestConfig,
    TrialRecord,
    WealthState,
    validate_config,
)
from .learner import (
    GradientBundle,
    PayoffModel,
    TrainingParams,
    _backward,
    _forward_raw,
    _squash,
    _squash_grad,
    growth_threshold,
    update_model,
)
from .operators import (
    Operator,
    OperatorSet,
    averaged_payoffs,
    check_disjoint,
    pair_consecutive,
)

UNPAIRED_MODES = ("mean-difference", "sigma-difference")


class EngineError(RuntimeError):
    """Raised on contract violations in the sequential engine."""


@dataclass(frozen=True)
class PairedNull:
    """H0: T1(Z) and T2(Z) have the same law."""

    t1: Operator
    t2: Operator

    @property
    def sets(self) -> tuple[OperatorSet, OperatorSet]:
        return OperatorSet([self.t1]), OperatorSet([self.t2])


@dataclass(frozen=True)
class RandomizedNull:
    """H0 over every pair drawn from two finite, disjoint operator sets."""

    set1: OperatorSet
    set2: OperatorSet

    def __post_init__(self):
        check_disjoint(self.set1, self.set2)

    @property
    def sets(self) -> tuple[OperatorSet, OperatorSet]:
        return self.set1, self.set2


@dataclass(frozen=True)
class UnpairedNull:
    """Two-sample null for streams whose batches carry +1/-1 group labels."""

    mode: str = "mean-difference"

    def __post_init__(self):
        if self.mode not in UNPAIRED_MODES:
            raise ConfigError(f"unpaired mode must be one of {UNPAIRED_MODES}")


NullSpec = Union[PairedNull, RandomizedNull, UnpairedNull]


def _accepted_tag(null: NullSpec) -> Tag | None:
    if isinstance(null, UnpairedNull):
        return None
    set1, _ = null.sets
    if any(op.kind == "cross_swap" or any(o.kind == "cross_swap" for o in op.ops) for op in set1):
        return Tag.PAIR_OF_PAIRS
    return None


def prepare_batch(batch: Batch, null: NullSpec) -> Batch:
    """Join consecutive pairs when the null's operators act on pairs of pairs."""
    if _accepted_tag(null) is Tag.PAIR_OF_PAIRS and batch.tag is Tag.PAIR:
        return pair_consecutive(batch)
    return batch


# -- scores -------------------------------------------------------------------------


def payoffs(batch: Batch, model: PayoffModel, null: NullSpec) -> np.ndarray:
    """Per-observation payoff (operator-averaged for randomized nulls)."""
    if isinstance(null, UnpairedNull):
        raise EngineError("unpaired nulls have no per-observation payoff; use unpaired_score")
    batch = prepare_batch(batch, null)
    set1, set2 = null.sets
    return averaged_payoffs(model, batch.data, batch.tag, set1, set2)


def _log_score_from_payoffs(pay: np.ndarray, mode: ScoreMode) -> float:
    if ScoreMode(mode) is ScoreMode.PRODUCT:
        return float(np.log1p(pay).sum())
    return float(math.log1p(float(pay.mean())))


def log_score(batch: Batch, model: PayoffModel, null: NullSpec, mode=ScoreMode.PRODUCT) -> float:
    if isinstance(null, UnpairedNull):
        return math.log(unpaired_score_batch(batch, model, null.mode))
    return _checked_log_score(payoffs(batch, model, null), model.q_bound, mode)


def _checked_log_score(pay: np.ndarray, q: float, mode) -> float:
    if np.any(np.abs(pay) > 2.0 * q):
        raise EngineError("payoff outside [-2q, 2q]")
    value = _log_score_from_payoffs(pay, mode)
    floor = len(pay) * math.log1p(-2.0 * q) if ScoreMode(mode) is ScoreMode.PRODUCT else math.log1p(-2.0 * q)
    if not value >= floor:
        raise EngineError("betting score fell below its positivity floor")
    return value


def compute_score(batch: Batch, model: PayoffModel, null: NullSpec, mode=ScoreMode.PRODUCT) -> float:
    """Betting score S_t: product or average of (1 + payoff) over the batch."""
    return math.exp(log_score(batch, model, null, mode))


def _sigma(model: PayoffModel, x):
    return model.q_bound * np.tanh(x)


def unpaired_score(batch_x, batch_y, model: PayoffModel, mode: str = "mean-difference") -> float:
    """Score for two unpaired groups: 1 + mean g(x) - mean g(y), or 1 + q tanh of the sum difference."""
    from .learner import _data_of, forward_rows

    if mode not in UNPAIRED_MODES:
        raise ConfigError(f"unpaired mode must be one of {UNPAIRED_MODES}")
    xs, _ = _data_of(batch_x)
    ys, _ = _data_of(batch_y)
    if xs.shape[0] == 0 or ys.shape[0] == 0:
        raise EngineError("both groups must be non-empty")
    gx = forward_rows(model, xs.reshape(xs.shape[0], -1))
    gy = forward_rows(model, ys.reshape(ys.shape[0], -1))
    if mode == "mean-difference":
        return 1.0 + (gx.mean() - gy.mean())
    return 1.0 + float(_sigma(model, gx.sum() - gy.sum()))


def unpaired_score_batch(batch: Batch, model: PayoffModel, mode: str) -> float:
    if batch.groups is None:
        raise EngineError("unpaired scoring needs group labels on the batch")
    return unpaired_score(batch.subset(batch.groups == 1), batch.subset(batch.groups == -1), model, mode)


def unpaired_objective(mode: str):
    """Training objective: sum over batches of log(unpaired score)."""

    def objective(model: PayoffModel, batches: Sequence[Batch], need_grad: bool = True):
        total = 0.0
        grads = GradientBundle.zeros_like(model).arrays if need_grad else None
        for batch in batches:
            x = batch.data.reshape(len(batch), -1)
            raw, cache = _forward_raw(model, x)
            g = _squash(model, raw)
            is_x = batch.groups == 1
            nx, ny = int(is_x.sum()), int((~is_x).sum())
            if nx == 0 or ny == 0:
                continue
            if mode == "mean-difference":
                diff = g[is_x].mean() - g[~is_x].mean()
                s = 1.0 + diff
                coef = np.where(is_x, 1.0 / nx, -1.0 / ny) / s
            else:
                diff = g[is_x].sum() - g[~is_x].sum()
                th = np.tanh(diff)
                s = 1.0 + model.q_bound * th
                coef = np.where(is_x, 1.0, -1.0) * model.q_bound * (1.0 - th * th) / s
            total += math.log(s)
            if need_grad:
                part = _backward(model, cache, coef * _squash_grad(model, raw))
                grads = tuple(a + b for a, b in zip(grads, part.arrays))
        return total, (GradientBundle(tuple(grads)) if need_grad else None)

    return objective


# -- sequential test -------------------------------------------------------------------


@dataclass(frozen=True)
class SequentialTestSpec:
    config: TestConfig
    null: NullSpec
    training: TrainingParams
    model_init: PayoffModel

    def __post_init__(self):
        validate_config(self.config)
        if abs(self.model_init.q_bound - self.config.q_bound) > 0.0:
            raise ConfigError("model q_bound must equal the test's q_bound")


@dataclass(frozen=True, eq=False)
class EngineState:
    wealth: WealthState
    model: PayoffModel
    accumulated: tuple[Batch, ...] = ()
    # (t, score, growth_estimate, growth_threshold)
    diagnostics: tuple[tuple[int, float, float, float], ...] = field(default=())

    @property
    def t(self) -> int:
        return self.wealth.t

    @classmethod
    def initial(cls, spec: SequentialTestSpec) -> EngineState:
        return cls(WealthState(), spec.model_init)


def _train(model: PayoffModel, data: Sequence[Batch], spec: SequentialTestSpec) -> PayoffModel:
    null = spec.null
    if isinstance(null, UnpairedNull):
        return update_model(model, data, spec.training, objective=unpaired_objective(null.mode))
    set1, set2 = null.sets
    return update_model(model, data, spec.training, set1, set2)


# the first update waits until one batch can train and a later one validate
MIN_TRAIN_BATCHES = 2


def retrain(model: PayoffModel, accumulated: Sequence[Batch], spec: SequentialTestSpec) -> PayoffModel:
    """Model for the next round: unchanged until two batches exist, then trained on all of them."""
    if len(accumulated) < MIN_TRAIN_BATCHES:
        return model
    return _train(model, accumulated, spec)


def step(state: EngineState, batch: MiniBatch, spec: SequentialTestSpec, train: bool = True) -> EngineState:
    """Score B_t with the current model, update wealth, check the threshold, then retrain."""
    if state.wealth.stopped:
        raise EngineError("the test has already stopped")
    index = getattr(batch, "index", state.t + 1)
    if index != state.t + 1:
        raise EngineError(f"expected batch {state.t + 1}, got batch {index}")
    cfg = spec.config
    prepared = prepare_batch(batch, spec.null)
    if isinstance(spec.null, UnpairedNull):
        ls = log_score(prepared, state.model, spec.null, cfg.score_mode)
        growth = ls
    else:
        pay = payoffs(prepared, state.model, spec.null)
        ls = _checked_log_score(pay, state.model.q_bound, cfg.score_mode)
        growth = float(np.log1p(pay).mean())
    wealth = state.wealth.update(ls, cfg.alpha)
    diag = (wealth.t, wealth.last_score, growth, growth_threshold(cfg.q_bound, wealth.t * len(prepared)))
    accumulated = state.accumulated + (prepared,)
    model = state.model
    if train and not wealth.stopped:
        model = retrain(model, accumulated, spec)
    return EngineState(wealth, model, accumulated, state.diagnostics + (diag,))


def _run(stream: Iterable[Batch], spec: SequentialTestSpec, train: bool) -> TrialRecord:
    cfg = spec.config
    state = EngineState.initial(spec)
    trajectory = []
    consumed = 0
    for t, batch in enumerate(stream, start=1):
        if t > cfg.t_max:
            break
        if not isinstance(batch, MiniBatch):
            batch = MiniBatch(batch.data, batch.tag, batch.groups, index=t)
        state = step(state, batch, spec, train=train)
        consumed += len(batch)
        trajectory.append((state.t, state.wealth.log_wealth))
        if state.wealth.stopped:
            break
    if not trajectory:
        raise EngineError("the stream yielded no batches")
    stopped = state.wealth.stopped
    return TrialRecord(
        trajectory=tuple(trajectory),
        stopping_time=state.t if stopped else None,
        decision=Decision.REJECT if stopped else Decision.CONTINUE,
        samples_consumed=consumed,
        diagnostics=state.diagnostics,
    )


def run_sequential(stream: Iterable[Batch], spec: SequentialTestSpec) -> TrialRecord:
    """Run the test until W_t >= 1/alpha or t_max batches have been seen."""
    return _run(stream, spec, train=True)


def run_oracle(
    stream: Iterable[Batch], model_star: PayoffModel, config: TestConfig, null: NullSpec
) -> TrialRecord:
    """The same test with a fixed, never retrained model."""
    spec = SequentialTestSpec(config, null, TrainingParams(max_epochs=0), model_star)
    return _run(stream, spec, train=False)


def stopping_time(log_wealths: Sequence[float], alpha: float) -> int | None:
    """First t (1-based) whose log-wealth reaches log(1/alpha)."""
    level = math.log(1.0 / alpha)
    for t, lw in enumerate(log_wealths, start=1):
        if lw >= level:
            return t
    return None


# -- batch e-value test --------------------------------------------------------------


def split_halves(data: Batch) -> tuple[Batch, Batch]:
    """First ceil(n/2) observations train, the rest evaluate."""
    n = len(data)
    if n < 2:
        raise EngineError("the batch test needs at least two observations")
    k = (n + 1) // 2
    return data.subset(slice(0, k)), data.subset(slice(k, n))


def batch_evalue_test(data: Batch, spec: SequentialTestSpec, alpha: float | None = None):
    """Sample-splitting e-value E_n = prod over the second half of (1 + payoff).

    The training half is itself split in two so that early stopping can
    validate on its second part. Returns ``(EValue, Decision)``.
    """
    alpha = spec.config.alpha if alpha is None else alpha
    d1, d2 = split_halves(data)
    d1 = prepare_batch(d1, spec.null)
    d2 = prepare_batch(d2, spec.null)
    if len(d1) >= 2:
        k = (len(d1) + 1) // 2
        train_parts = [d1.subset(slice(0, k)), d1.subset(slice(k, len(d1)))]
    else:
        train_parts = [d1]
    model = _train(spec.model_init, train_parts, spec)
    ls = log_score(d2, model, spec.null, ScoreMode.PRODUCT)
    e = EValue(math.exp(ls))
    return e, (Decision.REJECT if ls >= math.log(1.0 / alpha) else Decision.CONTINUE)


def combine_evalues(e1: EValue, e2: EValue) -> EValue:
    """Optional continuation: evidence from successive segments multiplies."""
    return EValue(e1.value * e2.value)


def with_config(spec: SequentialTestSpec, **changes) -> SequentialTestSpec:
    return replace(spec, config=replace(spec.config, **changes))
