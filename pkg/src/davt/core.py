"""Shared value types: observations, batches, test configuration and trial records."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration value violates its declared range."""


class Tag(str, enum.Enum):
    PLAIN = "plain"
    PAIR = "pair"
    PAIR_OF_PAIRS = "pair-of-pairs"
    CIT_TRIPLE = "cit-triple"
    AUGMENTED_CIT_PAIR = "augmented-cit-pair"


def _frozen_array(data, shape=None) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ValueError(f"shape extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ValueError(f"shape {shape} does not match {arr.size} entries")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("observations must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Observation:
    """A single fixed-shape real observation with an explicit layout tag."""

    data: np.ndarray
    tag: Tag = Tag.PLAIN

    def __init__(self, data, tag: Tag | str = Tag.PLAIN, shape: Sequence[int] | None = None):
        object.__setattr__(self, "data", _frozen_array(data, shape))
        object.__setattr__(self, "tag", Tag(tag))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            self.tag == other.tag
            and self.shape == other.shape
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return f"Observation(tag={self.tag.value}, shape={self.shape})"


@dataclass(frozen=True, eq=False)
class Batch:
    """Observations stacked along axis 0; all share one tag and shape.

    ``groups`` carries per-observation labels (+1 / -1) for unpaired streams.
    """

    data: np.ndarray
    tag: Tag = Tag.PLAIN
    groups: np.ndarray | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim < 1 or data.shape[0] < 1:
            raise ValueError("a batch needs at least one observation")
        if not np.all(np.isfinite(data)):
            raise ValueError("observations must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "tag", Tag(self.tag))
        if self.groups is not None:
            groups = np.array(self.groups, dtype=np.int64)
            if groups.shape != (data.shape[0],):
                raise ValueError("groups must carry one label per observation")
            if not np.all(np.isin(groups, (-1, 1))):
                raise ValueError("group labels must be +1 or -1")
            groups.setflags(write=False)
            object.__setattr__(self, "groups", groups)

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], groups=None, **kw):
        if not observations:
            raise ValueError("a batch needs at least one observation")
        tag, shape = observations[0].tag, observations[0].shape
        for z in observations:
            if z.tag != tag or z.shape != shape:
                raise ValueError("all observations in a batch must share tag and shape")
        return cls(np.stack([z.data for z in observations]), tag, groups, **kw)

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of a single observation."""
        return self.data.shape[1:]

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, i: int) -> Observation:
        return Observation(self.data[i], self.tag)

    @property
    def observations(self) -> list[Observation]:
        return [self[i] for i in range(len(self))]

    def subset(self, index) -> Batch:
        groups = None if self.groups is None else self.groups[index]
        return Batch(self.data[index], self.tag, groups)

    def minibatches(self, batch_size: int) -> Iterator[MiniBatch]:
        """Cut into consecutive mini-batches indexed from 1; a short tail is dropped."""
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        for t, start in enumerate(range(0, len(self) - batch_size + 1, batch_size), start=1):
            sl = slice(start, start + batch_size)
            groups = None if self.groups is None else self.groups[sl]
            yield MiniBatch(self.data[sl], self.tag, groups, index=t)


@dataclass(frozen=True, eq=False)
class MiniBatch(Batch):
    """The t-th batch B_t of a stream."""

    index: int = 1

    def __post_init__(self):
        super().__post_init__()
        if int(self.index) < 1:
            raise ValueError("mini-batch index must be a positive integer")


def concat_batches(batches: Sequence[Batch]) -> Batch:
    if not batches:
        raise ValueError("nothing to concatenate")
    tag = batches[0].tag
    if any(b.tag != tag or b.shape != batches[0].shape for b in batches):
        raise ValueError("batches differ in tag or shape")
    groups = None
    if batches[0].groups is not None:
        groups = np.concatenate([b.groups for b in batches])
    return Batch(np.concatenate([b.data for b in batches]), tag, groups)


class ScoreMode(str, enum.Enum):
    PRODUCT = "product"
    AVERAGE = "average"


@dataclass(frozen=True)
class TestConfig:
    alpha: float = 0.05
    batch_size: int = 90
    t_max: int = 30
    score_mode: ScoreMode = ScoreMode.PRODUCT
    q_bound: float = 0.45
    seed: int = 0

    __test__ = False  # not a pytest class

    def __post_init__(self):
        object.__setattr__(self, "score_mode", ScoreMode(self.score_mode))


def validate_config(cfg: TestConfig) -> TestConfig:
    """Return ``cfg`` unchanged, or raise ConfigError naming the first bad field."""
    if not 0.0 < cfg.alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {cfg.alpha}")
    if int(cfg.batch_size) != cfg.batch_size or cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be a positive integer, got {cfg.batch_size}")
    if int(cfg.t_max) != cfg.t_max or cfg.t_max < 1:
        raise ConfigError(f"t_max must be a positive integer, got {cfg.t_max}")
    if not 0.0 < cfg.q_bound < 0.5:
        raise ConfigError(f"q_bound must lie in (0, 0.5), got {cfg.q_bound}")
    if not 0 <= int(cfg.seed) < 2**64:
        raise ConfigError(f"seed must be a 64-bit unsigned integer, got {cfg.seed}")
    return cfg


def threshold(cfg: TestConfig) -> float:
    """Rejection threshold 1/alpha on the wealth."""
    return 1.0 / cfg.alpha


@dataclass(frozen=True)
class WealthState:
    t: int = 0
    log_wealth: float = 0.0
    last_score: float = 1.0
    stopped: bool = False

    @property
    def wealth(self) -> float:
        return math.exp(self.log_wealth)

    def update(self, log_score: float, alpha: float) -> WealthState:
        log_wealth = self.log_wealth + log_score
        return WealthState(
            t=self.t + 1,
            log_wealth=log_wealth,
            last_score=math.exp(log_score),
            stopped=log_wealth >= math.log(1.0 / alpha),
        )


class Decision(str, enum.Enum):
    REJECT = "reject"
    CONTINUE = "continue"


@dataclass(frozen=True)
class TrialRecord:
    trajectory: tuple[tuple[int, float], ...]
    stopping_time: int | None
    decision: Decision
    samples_consumed: int
    # (t, score, growth_estimate, growth_threshold) per step; empty when not tracked
    diagnostics: tuple[tuple[int, float, float, float], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "decision", Decision(self.decision))
        object.__setattr__(self, "trajectory", tuple((int(t), float(w)) for t, w in self.trajectory))
        object.__setattr__(
            self, "diagnostics", tuple((int(d[0]), *map(float, d[1:])) for d in self.diagnostics)
        )
        if (self.stopping_time is not None) != (self.decision is Decision.REJECT):
            raise ValueError("stopping_time must be present exactly when the decision is reject")

    @property
    def rejected(self) -> bool:
        return self.decision is Decision.REJECT

    @property
    def final_log_wealth(self) -> float:
        return self.trajectory[-1][1] if self.trajectory else 0.0


CSV_COLUMNS = ["trial_id", "t", "log_wealth", "stopped"]
DIAGNOSTIC_COLUMNS = ["score", "growth_estimate", "growth_threshold"]


def trajectory_rows(record: TrialRecord, trial_id: int, diagnostics: bool = False) -> list[list[str]]:
    diag = {d[0]: d[1:] for d in record.diagnostics}
    rows = []
    for t, lw in record.trajectory:
        stopped = record.stopping_time is not None and t >= record.stopping_time
        row = [str(trial_id), str(t), repr(lw), "1" if stopped else "0"]
        if diagnostics:
            row += [repr(v) for v in diag.get(t, (math.nan,) * 3)]
        rows.append(row)
    return rows


def records_to_csv(records: Sequence[TrialRecord], diagnostics: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS + (DIAGNOSTIC_COLUMNS if diagnostics else []))
    for i, rec in enumerate(records):
        writer.writerows(trajectory_rows(rec, i, diagnostics))
    return buf.getvalue()


def record_summary(record: TrialRecord, trial_id: int, seed: int) -> dict:
    return {
        "trial_id": trial_id,
        "stopping_time": record.stopping_time,
        "decision": record.decision.value,
        "samples_consumed": record.samples_consumed,
        "seed": seed,
    }


def record_to_json(record: TrialRecord, trial_id: int = 0, seed: int = 0) -> str:
    """Full serialization of a record; floats go through repr so they round-trip exactly."""
    payload = record_summary(record, trial_id, seed)
    payload["trajectory"] = [[t, repr(w)] for t, w in record.trajectory]
    payload["diagnostics"] = [[d[0], *map(repr, d[1:])] for d in record.diagnostics]
    return json.dumps(payload, sort_keys=True)


def record_from_json(text: str) -> TrialRecord:
    payload = json.loads(text)
    return TrialRecord(
        trajectory=tuple((t, float(w)) for t, w in payload["trajectory"]),
        stopping_time=payload["stopping_time"],
        decision=Decision(payload["decision"]),
        samples_consumed=payload["samples_consumed"],
        diagnostics=tuple((d[0], *map(float, d[1:])) for d in payload["diagnostics"]),
    )


def records_from_csv(text: str) -> dict[int, list[tuple[int, float, bool]]]:
    """Parse trajectory CSV back into ``{trial_id: [(t, log_wealth, stopped), ...]}``."""
    out: dict[int, list[tuple[int, float, bool]]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        out.setdefault(int(row["trial_id"]), []).append(
            (int(row["t"]), float(row["log_wealth"]), row["stopped"] == "1")
        )
    return out


@dataclass(frozen=True)
class EValue:
    value: float

    def __post_init__(self):
        if not self.value >= 0.0:
            raise ValueError(f"an e-value is nonnegative, got {self.value}")
