"""Comparators: batch-wise ONS betting on a fair payoff, and a permutation MMD test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .core import Batch, ConfigError, Decision, Tag, TrialRecord, WealthState
from .engine import (
    EngineError,
    SequentialTestSpec,
    UnpairedNull,
    retrain,
    payoffs,
    prepare_batch,
)

LAMBDA_MAX = 0.5
ONS_STEP = 2.0 / (2.0 - math.log(3.0))


@dataclass(frozen=True)
class OnsState:
    lam: float = 0.0
    a_accum: float = 1.0
    wealth: float = 1.0

    def __post_init__(self):
        if not -LAMBDA_MAX <= self.lam <= LAMBDA_MAX:
            raise ValueError(f"bet fraction {self.lam} outside [-1/2, 1/2]")
        if not self.a_accum > 0:
            raise ValueError("curvature accumulator must be positive")
        if not self.wealth > 0:
            raise ValueError("wealth must stay positive")


def ons_update(state: OnsState, z: float) -> OnsState:
    """Bet on payoff z with the current fraction, then take one ONS ascent step on log-wealth."""
    z = float(z)
    if not abs(z) <= 1.0:
        raise ValueError(f"payoff must lie in [-1, 1], got {z}")
    lam = state.lam
    growth = 1.0 + lam * z
    wealth = state.wealth * growth
    g = z / growth
    a = state.a_accum + g * g
    new_lam = min(LAMBDA_MAX, max(-LAMBDA_MAX, lam + ONS_STEP * g / a))
    assert -LAMBDA_MAX <= new_lam <= LAMBDA_MAX
    return OnsState(new_lam, a, wealth)


def seqit_run(stream: Iterable[Batch], spec: SequentialTestSpec, trace: list | None = None) -> TrialRecord:
    """Sequential two-sample test with one ONS bet fraction per batch.

    The fraction chosen before batch t is held fixed over the batch, so the
    wealth gains prod_j (1 + lambda * z_j) from the per-pair payoffs z_j of the
    model trained on earlier batches. The fraction is then updated by ONS on the
    batch-mean payoff. ``trace``, if given, receives the OnsState after every
    batch; its ``wealth`` field follows the one-bet-per-batch recurrence, while
    the record carries the per-pair log-wealth.
    """
    if isinstance(spec.null, UnpairedNull):
        raise EngineError("the ONS baseline needs paired observations")
    cfg = spec.config
    ons = OnsState()
    wealth = WealthState()
    model = spec.model_init
    seen: list[Batch] = []
    trajectory, diagnostics = [], []
    consumed = 0
    for t, batch in enumerate(stream, start=1):
        if t > cfg.t_max:
            break
        if batch.tag not in (Tag.PAIR, Tag.PAIR_OF_PAIRS, Tag.AUGMENTED_CIT_PAIR):
            raise EngineError(f"the ONS baseline needs paired observations, got {batch.tag.value}")
        prepared = prepare_batch(batch, spec.null)
        z = payoffs(prepared, model, spec.null)
        if np.any(np.abs(z) > 1.0):
            raise EngineError("payoffs must lie in [-1, 1]")
        lam = ons.lam
        log_score = float(np.log1p(lam * z).sum())
        ons = ons_update(ons, float(np.mean(z)))
        wealth = wealth.update(log_score, cfg.alpha)
        if trace is not None:
            trace.append(ons)
        consumed += len(batch)
        trajectory.append((t, wealth.log_wealth))
        # no growth condition applies to a fixed-fraction bet
        diagnostics.append((t, wealth.last_score, log_score / len(z), math.nan))
        seen.append(prepared)
        if wealth.stopped:
            break
        model = retrain(model, seen, spec)
    if not trajectory:
        raise EngineError("the stream yielded no batches")
    stopped = wealth.stopped
    return TrialRecord(
        trajectory=tuple(trajectory),
        stopping_time=wealth.t if stopped else None,
        decision=Decision.REJECT if stopped else Decision.CONTINUE,
        samples_consumed=consumed,
        diagnostics=tuple(diagnostics),
    )


# -- kernel two-sample test ---------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    bandwidth: float | str = "median"
    permutations: int = 200

    def __post_init__(self):
        if self.kind != "rbf":
            raise ConfigError(f"unsupported kernel {self.kind!r}")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ConfigError("bandwidth must be a positive number or 'median'")
        elif not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        if int(self.permutations) != self.permutations or self.permutations < 1:
            raise ConfigError("permutations must be a positive integer")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bandwidth": self.bandwidth, "permutations": self.permutations}


def _rows(sample) -> np.ndarray:
    if isinstance(sample, Batch):
        arr = sample.data
    elif isinstance(sample, np.ndarray):
        arr = np.asarray(sample, dtype=np.float64)
    else:
        arr = np.stack([np.asarray(getattr(o, "data", o), dtype=np.float64) for o in sample])
    return arr.reshape(arr.shape[0], -1)


def _check_sizes(x: np.ndarray, y: np.ndarray) -> None:
    if len(x) != len(y):
        raise ValueError(f"samples must have equal sizes, got {len(x)} and {len(y)}")
    if len(x) < 2:
        raise ValueError("each sample needs at least two points")


def median_bandwidth(pooled: np.ndarray) -> float:
    """Median pairwise Euclidean distance; 1 when the sample is degenerate."""
    med = float(np.median(pdist(pooled))) if len(pooled) > 1 else 0.0
    return med if med > 0 else 1.0


def _bandwidth(kernel: KernelSpec, pooled: np.ndarray) -> float:
    return median_bandwidth(pooled) if kernel.bandwidth == "median" else float(kernel.bandwidth)


def rbf(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth * bandwidth))


def mmd2_unbiased(xs, ys, kernel: KernelSpec = KernelSpec()) -> float:
    """Unbiased MMD^2 U-statistic for two samples of equal size m.

    Averages h(i, j) = k(x_i, x_j) + k(y_i, y_j) - k(x_i, y_j) - k(x_j, y_i)
    over the m(m-1) ordered pairs i != j, so identical samples score exactly 0.
    Sums are exactly rounded, so swapping the samples gives the same value bit
    for bit.
    """
    x, y = _rows(xs), _rows(ys)
    _check_sizes(x, y)
    m = len(x)
    bw = _bandwidth(kernel, np.vstack([x, y]))
    kxx, kyy, kxy = rbf(x, x, bw), rbf(y, y, bw), rbf(x, y, bw)
    within = math.fsum(kxx.ravel()) - math.fsum(np.diag(kxx))
    within += math.fsum(kyy.ravel()) - math.fsum(np.diag(kyy))
    cross = math.fsum(kxy.ravel()) - math.fsum(np.diag(kxy))
    return (within - 2.0 * cross) / (m * (m - 1))


def _mmd_from_splits(k: np.ndarray, order: np.ndarray, m: int) -> np.ndarray:
    """MMD^2 for each row of ``order``: entries [:m] form the first sample, [m:] the second, aligned by position."""
    labels = np.zeros((k.shape[0], order.shape[0]))
    labels[order[:, :m], np.arange(order.shape[0])[:, None]] = 1.0
    ka = k @ labels
    aka = np.einsum("ij,ij->j", labels, ka)
    row = k.sum(axis=1)
    one_ka = row @ labels
    bkb = row.sum() - 2.0 * one_ka + aka
    akb = one_ka - aka
    diag_a = np.diag(k) @ labels
    diag_b = np.trace(k) - diag_a
    aligned = k[order[:, :m], order[:, m:]].sum(axis=1)
    within = (aka - diag_a) + (bkb - diag_b)
    return (within - 2.0 * (akb - aligned)) / (m * (m - 1))


def permutation_pvalue(xs, ys, kernel: KernelSpec, rng: np.random.Generator) -> float:
    """(1 + #{permuted >= observed}) / (1 + permutations), ties counted as exceedances.

    Permutations of the pooled sample are drawn in a fixed order from ``rng``;
    the observed split uses the same arithmetic path as the permuted ones so
    ties compare exactly.
    """
    if kernel.permutations < 99:
        raise ConfigError("a permutation test needs at least 99 permutations")
    x, y = _rows(xs), _rows(ys)
    _check_sizes(x, y)
    m = len(x)
    pooled = np.vstack([x, y])
    k = rbf(pooled, pooled, _bandwidth(kernel, pooled))
    order = np.empty((kernel.permutations + 1, 2 * m), dtype=np.intp)
    order[0] = np.arange(2 * m)
    for j in range(1, kernel.permutations + 1):
        order[j] = rng.permutation(2 * m)
    stats = _mmd_from_splits(k, order, m)
    exceed = int(np.count_nonzero(stats[1:] >= stats[0]))
    return (1 + exceed) / (1 + kernel.permutations)


def mmd_test(batch: Batch, kernel: KernelSpec, rng: np.random.Generator, alpha: float) -> tuple[float, Decision]:
    """Permutation MMD test on a batch of (X, Y) pairs."""
    if batch.tag is not Tag.PAIR:
        raise EngineError("the MMD baseline needs a paired two-sample batch")
    p = permutation_pvalue(batch.data[:, 0], batch.data[:, 1], kernel, rng)
    return p, (Decision.REJECT if p <= alpha else Decision.CONTINUE)

