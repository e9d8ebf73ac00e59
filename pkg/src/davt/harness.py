"""Experiment configuration, seeding, Monte Carlo orchestration and result files.

A run is fully determined by its JSON config: every trial draws its streams
from seeds derived from ``master_seed``, the trial index and a role name, so
trials can execute in any order (or in parallel) and the outputs are
byte-identical between runs.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.stats import binom

from .baselines import KernelSpec, mmd_test, seqit_run
from .core import (
    Batch,
    ConfigError,
    Decision,
    MiniBatch,
    ScoreMode,
    Tag,
    TestConfig,
    TrialRecord,
    record_summary,
    records_to_csv,
    validate_config,
)
from .datasets import (
    BlobParams,
    CitParams,
    GlyphParams,
    ROTATIONS,
    gen_blob,
    gen_blob_labelled,
    gen_cit,
    gen_glyph_stream,
    gen_symmetric,
    make_rng,
    modelx_resample_batch,
    rotated_covariance,
)
from .engine import (
    NullSpec,
    PairedNull,
    RandomizedNull,
    SequentialTestSpec,
    UnpairedNull,
    _train,
    batch_evalue_test,
    prepare_batch,
    run_oracle,
    run_sequential,
)
from .learner import PayoffModel, TrainingParams, init_model
from .operators import (
    CROSS_SWAP,
    IDENTITY,
    NEGATE,
    PROJECT_FIRST,
    PROJECT_SWAP,
    Operator,
    OperatorError,
    OperatorSet,
    compose,
    rotate,
)
from .perf import tune_allocator

log = logging.getLogger(__name__)

SCHEMA = 1
EXPERIMENTS = ("blob_twosample", "blob_independence", "cit", "glyph_rotation", "symmetry", "custom")
METHODS = ("davt", "seqit_ons", "mmd_perm", "oracle", "batch_evalue")
SOURCES = ("blob", "blob_labelled", "blob_unpaired", "cit", "glyph", "symmetry")
SEED_MASK = (1 << 64) - 1

# methods that need a stream of (X, Y) pairs from a two-sample problem
_TWO_SAMPLE = {"blob", "glyph"}


class HarnessError(RuntimeError):
    """A trial failed; carries the trial index."""

    def __init__(self, trial: int, cause: BaseException):
        super().__init__(f"trial {trial} failed: {cause}")
        self.trial = trial
        self.cause = cause


# -- seeding ------------------------------------------------------------------------


def derive_seed(master: int, trial_index: int, role: str) -> int:
    """64-bit seed from a 128-bit BLAKE2b digest of (master, trial, role).

    The message is master and trial as little-endian uint64 followed by the
    UTF-8 role name; the seed is the digest read as a little-endian integer,
    truncated to its low 64 bits.
    """
    if not 0 <= master <= SEED_MASK:
        raise ConfigError(f"master seed must be a 64-bit unsigned integer, got {master}")
    msg = struct.pack("<QQ", master, trial_index & SEED_MASK) + role.encode("utf-8")
    digest = hashlib.blake2b(msg, digest_size=16).digest()
    return int.from_bytes(digest, "little") & SEED_MASK


# -- configuration ------------------------------------------------------------------


def null_to_dict(null: NullSpec) -> dict:
    if isinstance(null, PairedNull):
        return {"kind": "paired", "t1": null.t1.to_dict(), "t2": null.t2.to_dict()}
    if isinstance(null, RandomizedNull):
        return {"kind": "randomized", "set1": null.set1.to_list(), "set2": null.set2.to_list()}
    return {"kind": "unpaired", "mode": null.mode}


def null_from_dict(d: dict) -> NullSpec:
    if not isinstance(d, dict) or "kind" not in d:
        raise ConfigError("null needs a 'kind' of paired, randomized or unpaired")
    kind = d["kind"]
    keys = {"paired": {"t1", "t2"}, "randomized": {"set1", "set2"}, "unpaired": {"mode"}}
    if kind not in keys:
        raise ConfigError(f"unknown null kind {kind!r}")
    _no_extra(d, keys[kind] | {"kind"}, "null")
    try:
        if kind == "paired":
            return PairedNull(Operator.from_dict(d["t1"]), Operator.from_dict(d["t2"]))
        if kind == "randomized":
            return RandomizedNull(OperatorSet.from_list(d["set1"]), OperatorSet.from_list(d["set2"]))
        return UnpairedNull(d.get("mode", "mean-difference"))
    except (OperatorError, KeyError) as exc:
        raise ConfigError(f"invalid null: {exc}") from exc


GLYPH_NULL = RandomizedNull(
    OperatorSet([compose(rotate(a), PROJECT_FIRST) for a in ROTATIONS]),
    OperatorSet([PROJECT_SWAP]),
)

DEFAULTS: dict[str, dict] = {
    "blob_twosample": {
        "test": {"batch_size": 90, "t_max": 30},
        "model": {"hidden": [30, 30], "layer_norm": True},
        "null": null_to_dict(PairedNull(PROJECT_SWAP, PROJECT_FIRST)),
        "generator": {"source": "blob", "hypothesis": "alt", "rho": 0.0, "spacing": 5.0, "shared_component": None},
        "training": {},
    },
    "blob_independence": {
        "test": {"batch_size": 90, "t_max": 30},
        "model": {"hidden": [30, 30], "layer_norm": True},
        "null": null_to_dict(PairedNull(CROSS_SWAP, IDENTITY)),
        "generator": {"source": "blob_labelled", "hypothesis": "alt", "rho": 0.0, "spacing": 5.0, "shared_component": None},
        "training": {},
    },
    "cit": {
        "test": {"batch_size": 100, "t_max": 40},
        "model": {"hidden": [128], "layer_norm": False},
        "null": null_to_dict(PairedNull(PROJECT_FIRST, compose(PROJECT_FIRST, Operator("swap")))),
        "generator": {"source": "cit", "hypothesis": "alt", "d": 20, "effect": 3.0},
        "training": {"l2_coeff": 0.01},
    },
    "glyph_rotation": {
        "test": {"batch_size": 16, "t_max": 30},
        "model": {"hidden": [128, 64], "layer_norm": False},
        "null": null_to_dict(GLYPH_NULL),
        "generator": {"source": "glyph", "p": 0.3, "noise_std": 0.3},
        "training": {"l1_coeff": 0.01, "l2_coeff": 0.01},
    },
    "symmetry": {
        "test": {"batch_size": 50, "t_max": 30},
        "model": {"hidden": [16, 16], "layer_norm": False},
        "null": null_to_dict(PairedNull(NEGATE, IDENTITY)),
        "generator": {"source": "symmetry", "mode": "shifted", "shift": 0.5},
        "training": {},
    },
    "custom": {
        "test": {},
        "model": {"hidden": [30, 30], "layer_norm": True},
        "training": {},
    },
}

_GENERATOR_KEYS = {
    "blob": {"hypothesis", "rho", "spacing", "shared_component"},
    "blob_labelled": {"hypothesis", "rho", "spacing", "shared_component"},
    "blob_unpaired": {"hypothesis", "rho", "spacing", "shared_component"},
    "cit": {"hypothesis", "d", "effect"},
    "glyph": {"p", "noise_std"},
    "symmetry": {"mode", "shift"},
}
_GENERATOR_DEFAULTS = {
    "blob": {"hypothesis": "alt", "rho": 0.0, "spacing": 5.0, "shared_component": None},
    "cit": {"hypothesis": "alt", "d": 20, "effect": 3.0},
    "glyph": {"p": 0.3, "noise_std": 0.3},
    "symmetry": {"mode": "shifted", "shift": 0.5},
}
_GENERATOR_DEFAULTS["blob_labelled"] = _GENERATOR_DEFAULTS["blob"]
_GENERATOR_DEFAULTS["blob_unpaired"] = _GENERATOR_DEFAULTS["blob"]

_TOP_KEYS = {
    "schema", "experiment", "method", "null", "test", "training", "model", "generator",
    "kernel", "oracle_batches", "sample_size", "trials", "master_seed", "workers", "note",
}
_TEST_KEYS = {"alpha", "batch_size", "t_max", "score_mode", "q_bound"}
_TRAINING_KEYS = {"learning_rate", "max_epochs", "patience", "loss_variant", "l1_coeff", "l2_coeff"}
_MODEL_KEYS = {"hidden", "layer_norm"}
_KERNEL_KEYS = {"kind", "bandwidth", "permutations"}


def _no_extra(d: dict, allowed: set, where: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown key {extra[0]!r} in {where}")


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (30, 30)
    layer_norm: bool = True

    def __post_init__(self):
        if any(int(h) != h or h < 1 for h in self.hidden):
            raise ConfigError("hidden layer widths must be positive integers")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    method: str
    null: NullSpec
    test: TestConfig
    training: TrainingParams
    model: ModelSpec
    generator: dict
    kernel: KernelSpec = KernelSpec()
    oracle_batches: int = 10
    sample_size: int | None = None
    trials: int = 100
    master_seed: int = 0
    workers: int = 1
    note: str = ""

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if int(self.trials) != self.trials or self.trials < 1:
            raise ConfigError("trials must be a positive integer")
        if int(self.workers) != self.workers or self.workers < 1:
            raise ConfigError("workers must be a positive integer")
        if int(self.oracle_batches) != self.oracle_batches or self.oracle_batches < 2:
            raise ConfigError("oracle_batches must be an integer >= 2")
        if self.sample_size is not None and (int(self.sample_size) != self.sample_size or self.sample_size < 2):
            raise ConfigError("sample_size must be an integer >= 2")
        if not 0 <= self.master_seed <= SEED_MASK:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")
        validate_config(self.test)
        _check_compatibility(self)

    @property
    def source(self) -> str:
        return self.generator["source"]

    @property
    def evaluation_size(self) -> int:
        return self.sample_size if self.sample_size is not None else self.test.batch_size * self.test.t_max

    def to_dict(self) -> dict:
        t, tr = self.test, self.training
        return {
            "schema": SCHEMA,
            "experiment": self.experiment,
            "method": self.method,
            "null": null_to_dict(self.null),
            "test": {
                "alpha": t.alpha,
                "batch_size": t.batch_size,
                "t_max": t.t_max,
                "score_mode": t.score_mode.value,
                "q_bound": t.q_bound,
            },
            "training": {
                "learning_rate": tr.learning_rate,
                "max_epochs": tr.max_epochs,
                "patience": tr.patience,
                "loss_variant": tr.loss_variant,
                "l1_coeff": tr.l1_coeff,
                "l2_coeff": tr.l2_coeff,
            },
            "model": {"hidden": list(self.model.hidden), "layer_norm": self.model.layer_norm},
            "generator": dict(self.generator),
            "kernel": self.kernel.to_dict(),
            "oracle_batches": self.oracle_batches,
            "sample_size": self.sample_size,
            "trials": self.trials,
            "master_seed": self.master_seed,
            "workers": self.workers,
            "note": self.note,
        }

    def canonical_json(self) -> str:
        d = self.to_dict()
        d.pop("workers")  # execution detail, not part of the experiment
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def replace(self, **changes) -> ExperimentConfig:
        d = self.to_dict()
        for key, value in changes.items():
            if isinstance(value, dict) and isinstance(d.get(key), dict):
                d[key] = {**d[key], **value}
            else:
                d[key] = value
        return config_from_dict(d)


def _check_compatibility(cfg: ExperimentConfig) -> None:
    src, method, null = cfg.source, cfg.method, cfg.null
    if method in ("mmd_perm", "seqit_ons") and src not in _TWO_SAMPLE:
        raise ConfigError(f"{method} requires a paired two-sample stream; {cfg.experiment} ({src}) is not one")
    if method in ("mmd_perm", "batch_evalue") and cfg.test.score_mode is not ScoreMode.PRODUCT:
        raise ConfigError(f"{method} only supports the product score")
    if isinstance(null, UnpairedNull) != (src == "blob_unpaired"):
        raise ConfigError("unpaired nulls go with the blob_unpaired source and only with it")
    if isinstance(null, UnpairedNull) and method not in ("davt", "oracle"):
        raise ConfigError(f"{method} does not support unpaired nulls")
    if src == "cit" and method != "mmd_perm":
        _check_operators(null, Tag.AUGMENTED_CIT_PAIR, (2, 2 + int(cfg.generator["d"])))


def _check_operators(null: NullSpec, tag: Tag, shape: tuple) -> None:
    if isinstance(null, UnpairedNull):
        return
    for op in [*null.sets[0], *null.sets[1]]:
        try:
            op.output_signature(tag, shape)
        except OperatorError as exc:
            raise ConfigError(f"null operators do not fit the data: {exc}") from exc


def _section(d: dict, key: str, allowed: set, defaults: dict) -> dict:
    sec = d.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{key} must be an object")
    _no_extra(sec, allowed, key)
    return {**defaults, **sec}


def _resolve_generator(experiment: str, given: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError("generator must be an object")
    base = dict(DEFAULTS[experiment].get("generator", {}))
    source = given.get("source", base.get("source"))
    if source is None:
        raise ConfigError("custom experiments need generator.source")
    if source not in SOURCES:
        raise ConfigError(f"generator.source must be one of {SOURCES}, got {source!r}")
    if experiment != "custom" and source != base["source"]:
        raise ConfigError(f"experiment {experiment} uses generator source {base['source']!r}")
    _no_extra(given, _GENERATOR_KEYS[source] | {"source"}, "generator")
    out = {"source": source, **_GENERATOR_DEFAULTS[source], **{k: v for k, v in given.items() if k != "source"}}
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    """Validate a config object and fill every default."""
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    _no_extra(d, _TOP_KEYS, "config")
    if d.get("schema", SCHEMA) != SCHEMA:
        raise ConfigError(f"unsupported schema {d.get('schema')!r}; expected {SCHEMA}")
    for key in ("experiment", "method"):
        if key not in d:
            raise ConfigError(f"missing required key {key!r}")
    experiment = d["experiment"]
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    defaults = DEFAULTS[experiment]
    test = _section(d, "test", _TEST_KEYS, defaults["test"])
    training = _section(d, "training", _TRAINING_KEYS, defaults["training"])
    model = _section(d, "model", _MODEL_KEYS, defaults["model"])
    kernel = _section(d, "kernel", _KERNEL_KEYS, {})
    generator = _resolve_generator(experiment, d.get("generator", {}))
    if "null" in d:
        null = null_from_dict(d["null"])
    elif "null" in defaults:
        null = null_from_dict(defaults["null"])
    else:
        raise ConfigError("custom experiments need an explicit null")
    try:
        return ExperimentConfig(
            experiment=experiment,
            method=d["method"],
            null=null,
            test=TestConfig(**test),
            training=TrainingParams(**training),
            model=ModelSpec(tuple(model["hidden"]), bool(model["layer_norm"])),
            generator=generator,
            kernel=KernelSpec(**kernel),
            oracle_batches=d.get("oracle_batches", 10),
            sample_size=d.get("sample_size"),
            trials=d.get("trials", 100),
            master_seed=d.get("master_seed", 0),
            workers=d.get("workers", 1),
            note=d.get("note", ""),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(d)


def null_version(cfg: ExperimentConfig) -> ExperimentConfig:
    """The same experiment with its generator switched to the null."""
    src = cfg.source
    if src in ("blob", "blob_labelled", "blob_unpaired", "cit"):
        return cfg.replace(generator={"hypothesis": "null"})
    if src == "glyph":
        return cfg.replace(generator={"p": 0.5})
    return cfg.replace(generator={"mode": "null"})


# -- data streams ---------------------------------------------------------------------


def generator_constants(cfg: ExperimentConfig) -> dict:
    """Fixed quantities of the data generator, shared by all trials."""
    g = cfg.generator
    src = g["source"]
    if src.startswith("blob"):
        return _blob_params(cfg).to_dict()
    if src == "cit":
        return _cit_params(cfg).to_dict()
    if src == "glyph":
        return _glyph_params(cfg).to_dict()
    return {"mode": g["mode"], "shift": g["shift"]}


def _blob_params(cfg: ExperimentConfig) -> BlobParams:
    g = cfg.generator
    return BlobParams(
        spacing=g["spacing"],
        alt_cov=rotated_covariance(),
        rho=g["rho"],
        hypothesis=g["hypothesis"],
        shared_component=g["shared_component"],
    )


def _cit_params(cfg: ExperimentConfig) -> CitParams:
    g = cfg.generator
    rng = make_rng(derive_seed(cfg.master_seed, 0, "cit-coefficients"))
    return CitParams.random(int(g["d"]), rng, g["hypothesis"], effect=g["effect"])


def _glyph_params(cfg: ExperimentConfig) -> GlyphParams:
    return GlyphParams(p=cfg.generator["p"], noise_std=cfg.generator["noise_std"])


def sampler(cfg: ExperimentConfig) -> Callable[[int, np.random.Generator], Batch]:
    """Function drawing n raw observations for this experiment."""
    src = cfg.source
    if src == "blob":
        params = _blob_params(cfg)
        return lambda n, rng: gen_blob(n, params, rng)
    if src == "blob_labelled":
        params = _blob_params(cfg)
        return lambda n, rng: gen_blob_labelled(n, params, rng)
    if src == "blob_unpaired":
        params = _blob_params(cfg)

        def unpaired(n, rng):
            pairs = gen_blob(n, params, rng)
            # each pair contributes one point: X on heads, Y on tails
            coin = rng.random(n) < 0.5
            pts = np.where(coin[:, None], pairs.data[:, 0], pairs.data[:, 1])
            return Batch(pts, Tag.PLAIN, np.where(coin, 1.0, -1.0))

        return unpaired
    if src == "cit":
        params = _cit_params(cfg)
        return lambda n, rng: modelx_resample_batch(gen_cit(n, params, rng), params, rng)
    if src == "glyph":
        params = _glyph_params(cfg)
        return lambda n, rng: gen_glyph_stream(n, params, rng)
    g = cfg.generator
    return lambda n, rng: gen_symmetric(n, g["mode"], rng, g["shift"])


def batch_stream(cfg: ExperimentConfig, seed: int) -> Iterator[MiniBatch]:
    draw = sampler(cfg)
    rng = make_rng(seed)
    for t in range(1, cfg.test.t_max + 1):
        b = draw(cfg.test.batch_size, rng)
        yield MiniBatch(b.data, b.tag, b.groups, index=t)


def input_dim(cfg: ExperimentConfig, null: NullSpec | None = None) -> int:
    null = cfg.null if null is None else null
    probe = prepare_batch(sampler(cfg)(4, make_rng(0)), null)
    if isinstance(null, UnpairedNull):
        return int(np.prod(probe.shape))
    _, shape = null.sets[0].members[0].output_signature(probe.tag, probe.shape)
    return int(np.prod(shape))


def _fresh_model(cfg: ExperimentConfig, seed: int, null: NullSpec | None = None) -> PayoffModel:
    dims = (input_dim(cfg, null), *cfg.model.hidden, 1)
    return init_model(dims, make_rng(seed), cfg.model.layer_norm, cfg.test.q_bound)


# -- trials ---------------------------------------------------------------------------

ROLES = {
    "davt": ("data", "model"),
    "seqit_ons": ("data", "model"),
    "mmd_perm": ("data", "permutations"),
    "oracle": ("data", "model", "oracle-data"),
    "batch_evalue": ("data", "model"),
}

SEQIT_NULL = PairedNull(PROJECT_FIRST, PROJECT_SWAP)


def trial_seeds(cfg: ExperimentConfig, trial: int) -> dict[str, int]:
    return {role: derive_seed(cfg.master_seed, trial, role) for role in ROLES[cfg.method]}


def _batch_record(log_evidence: float, rejected: bool, cfg: ExperimentConfig) -> TrialRecord:
    # one-shot tests decide once, after all data; on the time axis that is t_max
    t = cfg.test.t_max
    return TrialRecord(
        trajectory=((t, log_evidence),),
        stopping_time=t if rejected else None,
        decision=Decision.REJECT if rejected else Decision.CONTINUE,
        samples_consumed=cfg.evaluation_size,
        diagnostics=((t, math.nan, math.nan, math.nan),),
    )


def run_trial(cfg: ExperimentConfig, trial: int) -> TrialRecord:
    """One independent trial, fully determined by the config and the trial index."""
    seeds = trial_seeds(cfg, trial)
    method = cfg.method
    if method == "mmd_perm":
        data = sampler(cfg)(cfg.evaluation_size, make_rng(seeds["data"]))
        p, decision = mmd_test(data, cfg.kernel, make_rng(seeds["permutations"]), cfg.test.alpha)
        # -log p crosses log(1/alpha) exactly when p <= alpha
        return _batch_record(-math.log(p), decision is Decision.REJECT, cfg)
    if method == "batch_evalue":
        data = sampler(cfg)(cfg.evaluation_size, make_rng(seeds["data"]))
        spec = SequentialTestSpec(cfg.test, cfg.null, cfg.training, _fresh_model(cfg, seeds["model"]))
        e, decision = batch_evalue_test(data, spec)
        log_e = math.log(e.value) if e.value > 0 else -math.inf
        return _batch_record(log_e, decision is Decision.REJECT, cfg)
    stream = batch_stream(cfg, seeds["data"])
    if method == "seqit_ons":
        model = _fresh_model(cfg, seeds["model"], SEQIT_NULL)
        spec = SequentialTestSpec(cfg.test, SEQIT_NULL, cfg.training, model)
        return seqit_run(stream, spec)
    model = _fresh_model(cfg, seeds["model"])
    spec = SequentialTestSpec(cfg.test, cfg.null, cfg.training, model)
    if method == "oracle":
        oracle_model = train_oracle(cfg, spec, seeds["oracle-data"])
        return run_oracle(stream, oracle_model, cfg.test, cfg.null)
    return run_sequential(stream, spec)


def train_oracle(cfg: ExperimentConfig, spec: SequentialTestSpec, seed: int) -> PayoffModel:
    """Fit a payoff model on independent data; it is then frozen for the whole test."""
    draw = sampler(cfg)
    rng = make_rng(seed)
    batches = [prepare_batch(draw(cfg.test.batch_size, rng), cfg.null) for _ in range(cfg.oracle_batches)]
    return _train(spec.model_init, batches, spec)


def _safe_trial(cfg: ExperimentConfig, trial: int) -> TrialRecord:
    try:
        return run_trial(cfg, trial)
    except Exception as exc:  # noqa: BLE001 - re-raised with the trial id
        raise HarnessError(trial, exc) from exc


# -- aggregation ----------------------------------------------------------------------


@dataclass(frozen=True)
class RunSummary:
    experiment: str
    method: str
    alpha: float
    batch_size: int
    trials: int
    rejection_rate_by_t: tuple[tuple[int, float], ...]
    stopping_times: tuple[int | None, ...]
    mean_samples: float
    config_digest: str
    records: tuple[TrialRecord, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        rates = [r for _, r in self.rejection_rate_by_t]
        assert all(a <= b for a, b in zip(rates, rates[1:])), "rejection rate must be nondecreasing"

    @property
    def t_max(self) -> int:
        return self.rejection_rate_by_t[-1][0]

    @property
    def final_rejection_rate(self) -> float:
        return self.rejection_rate_by_t[-1][1]

    @property
    def rejections(self) -> int:
        return sum(s is not None for s in self.stopping_times)

    def censored_stopping_times(self) -> np.ndarray:
        """Stopping times with non-rejecting trials counted at t_max."""
        return np.array([self.t_max if s is None else s for s in self.stopping_times], dtype=float)

    @property
    def mean_stopping_time(self) -> float:
        return float(self.censored_stopping_times().mean())

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "experiment": self.experiment,
            "method": self.method,
            "alpha": self.alpha,
            "batch_size": self.batch_size,
            "trials": self.trials,
            "rejection_rate_by_t": [[t, r] for t, r in self.rejection_rate_by_t],
            "stopping_times": list(self.stopping_times),
            "mean_samples": self.mean_samples,
            "config_digest": self.config_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> RunSummary:
        return cls(
            experiment=d["experiment"],
            method=d["method"],
            alpha=d["alpha"],
            batch_size=d["batch_size"],
            trials=d["trials"],
            rejection_rate_by_t=tuple((int(t), float(r)) for t, r in d["rejection_rate_by_t"]),
            stopping_times=tuple(d["stopping_times"]),
            mean_samples=d["mean_samples"],
            config_digest=d["config_digest"],
        )


def summarize(cfg: ExperimentConfig, records: Sequence[TrialRecord]) -> RunSummary:
    n = len(records)
    stops = tuple(r.stopping_time for r in records)
    rates = []
    for t in range(1, cfg.test.t_max + 1):
        rates.append((t, sum(s is not None and s <= t for s in stops) / n))
    return RunSummary(
        experiment=cfg.experiment,
        method=cfg.method,
        alpha=cfg.test.alpha,
        batch_size=cfg.test.batch_size,
        trials=n,
        rejection_rate_by_t=tuple(rates),
        stopping_times=stops,
        mean_samples=float(np.mean([r.samples_consumed for r in records])),
        config_digest=cfg.digest(),
        records=tuple(records),
    )


def manifest(cfg: ExperimentConfig) -> dict:
    return {
        "schema": SCHEMA,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "seed_function": "blake2b-128(le_u64(master) || le_u64(trial) || utf8(role)), low 64 bits",
        "trial_seeds": [trial_seeds(cfg, i) for i in range(cfg.trials)],
        "generator_constants": generator_constants(cfg),
        "binomial_envelope": {
            "level": 0.975,
            "max_rejections_under_null": int(binomial_envelope(cfg.trials, cfg.test.alpha)),
        },
    }


def binomial_envelope(trials: int, alpha: float, level: float = 0.975) -> int:
    """Largest rejection count compatible with a level-alpha test at the given one-sided level."""
    return int(binom.ppf(level, trials, alpha))


def run_trials(
    cfg: ExperimentConfig,
    out_dir=None,
    workers: int | None = None,
    emit_diagnostics: bool = False,
    order: Sequence[int] | None = None,
) -> RunSummary:
    """Run every trial, aggregate in trial order and optionally write the result files.

    ``order`` only changes the execution order (for checking trial independence).
    """
    tune_allocator()
    workers = cfg.workers if workers is None else workers
    order = list(range(cfg.trials)) if order is None else list(order)
    if sorted(order) != list(range(cfg.trials)):
        raise ConfigError("order must be a permutation of the trial indices")
    if workers > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=workers)(delayed(_safe_trial)(cfg, i) for i in order)
    else:
        results = [_safe_trial(cfg, i) for i in order]
    by_trial = dict(zip(order, results))
    records = [by_trial[i] for i in range(cfg.trials)]
    summary = summarize(cfg, records)
    if out_dir is not None:
        write_outputs(cfg, summary, out_dir, emit_diagnostics)
    return summary


def write_outputs(cfg: ExperimentConfig, summary: RunSummary, out_dir, emit_diagnostics: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trajectories.csv").write_text(_with_method(records_to_csv(summary.records, emit_diagnostics), cfg.method))
    (out / "summary.json").write_text(summary.to_json())
    (out / "manifest.json").write_text(json.dumps(manifest(cfg), indent=2, sort_keys=True) + "\n")
    trials = [record_summary(r, i, trial_seeds(cfg, i)["data"]) for i, r in enumerate(summary.records)]
    (out / "trials.json").write_text(json.dumps(trials, indent=2, sort_keys=True) + "\n")


def _with_method(text: str, method: str) -> str:
    lines = text.splitlines()
    out = [lines[0] + ",method"] + [line + "," + method for line in lines[1:]]
    return "\n".join(out) + "\n"


# -- reporting ------------------------------------------------------------------------

QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


def load_summary(path) -> RunSummary:
    try:
        return RunSummary.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read summary {path}: {exc}") from exc


def report(summary_paths: Sequence, summaries: Sequence[RunSummary] | None = None) -> tuple[str, str]:
    """Methods x time rejection-rate table and stopping-time quantile table, both as CSV."""
    if summaries is None:
        summaries = [load_summary(p) for p in summary_paths]
    if not summaries:
        raise ConfigError("report needs at least one summary")
    axis = [t for t, _ in summaries[0].rejection_rate_by_t]
    for s in summaries[1:]:
        if [t for t, _ in s.rejection_rate_by_t] != axis:
            raise ConfigError("summaries do not share the same time axis")
    labels = _labels(summaries)
    rates = io.StringIO()
    w = csv.writer(rates, lineterminator="\n")
    w.writerow(["t", *labels])
    for i, t in enumerate(axis):
        w.writerow([t, *(repr(s.rejection_rate_by_t[i][1]) for s in summaries)])
    quant = io.StringIO()
    w = csv.writer(quant, lineterminator="\n")
    w.writerow(["method", "trials", "rejected", *(f"q{int(q * 100)}" for q in QUANTILES), "mean_censored"])
    for label, s in zip(labels, summaries):
        stops = [x for x in s.stopping_times if x is not None]
        qs = np.quantile(stops, QUANTILES).tolist() if stops else [math.nan] * len(QUANTILES)
        w.writerow([label, s.trials, len(stops), *map(repr, qs), repr(s.mean_stopping_time)])
    return rates.getvalue(), quant.getvalue()


def _labels(summaries: Sequence[RunSummary]) -> list[str]:
    labels, seen = [], {}
    for s in summaries:
        base = f"{s.experiment}:{s.method}"
        seen[base] = seen.get(base, 0) + 1
        labels.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
    return labels


def describe(summary: RunSummary) -> str:
    return (
        f"{summary.experiment}/{summary.method}: {summary.rejections}/{summary.trials} rejected by "
        f"t={summary.t_max} (rate {summary.final_rejection_rate:.3f}), "
        f"mean stopping time {summary.mean_stopping_time:.2f}, mean samples {summary.mean_samples:.1f}"
    )

