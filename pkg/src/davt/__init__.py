"""Deep anytime-valid hypothesis testing by betting with trainable payoff models."""
from .core import (
    Batch,
    ConfigError,
    Decision,
    EValue,
    MiniBatch,
    Observation,
    ScoreMode,
    Tag,
    TestConfig,
    TrialRecord,
    WealthState,
)
from .engine import (
    PairedNull,
    RandomizedNull,
    SequentialTestSpec,
    UnpairedNull,
    batch_evalue_test,
    compute_score,
    run_oracle,
    run_sequential,
)
from .learner import PayoffModel, TrainingParams, init_model, train_model
from .operators import Operator, OperatorSet, compose, rotate
from .perf import tune_allocator

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "ConfigError",
    "Decision",
    "EValue",
    "MiniBatch",
    "Observation",
    "Operator",
    "OperatorSet",
    "PairedNull",
    "PayoffModel",
    "RandomizedNull",
    "ScoreMode",
    "SequentialTestSpec",
    "Tag",
    "TestConfig",
    "TrainingParams",
    "TrialRecord",
    "UnpairedNull",
    "WealthState",
    "batch_evalue_test",
    "compose",
    "compute_score",
    "init_model",
    "rotate",
    "run_oracle",
    "run_sequential",
    "train_model",
    "tune_allocator",
]
