"""Bounded payoff network, log-wealth objective, backpropagation and Adam training."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import Batch, ConfigError, Tag, concat_batches
from .operators import Operator, OperatorSet, model_inputs

log = logging.getLogger(__name__)

LN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
LOSS_VARIANTS = ("plain", "sigma")


@dataclass(frozen=True, eq=False)
class PayoffModel:
    """Feed-forward ReLU network whose output is squashed into (-q, q).

    Weights are stored ``(fan_in, fan_out)``; ``ln_gain``/``ln_bias`` hold the
    affine layer-norm parameters of each hidden layer (empty without layer norm).
    """

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    ln_gain: tuple[np.ndarray, ...] = ()
    ln_bias: tuple[np.ndarray, ...] = ()
    q_bound: float = 0.45
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or dims[-1] != 1 or any(d < 1 for d in dims):
            raise ConfigError(f"layer_dims must run from the input width to 1, got {dims}")
        if not 0.0 < self.q_bound < 0.5:
            raise ConfigError(f"q_bound must lie in (0, 0.5), got {self.q_bound}")
        object.__setattr__(self, "layer_dims", dims)
        for name in ("weights", "biases", "ln_gain", "ln_bias"):
            arrs = tuple(np.array(a, dtype=np.float64) for a in getattr(self, name))
            for a in arrs:
                a.setflags(write=False)
            object.__setattr__(self, name, arrs)
        n_layers = len(dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ConfigError("one weight matrix and bias vector per layer expected")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ConfigError(f"layer {i} parameter shapes do not match layer_dims")
        if self.ln_gain and (len(self.ln_gain) != n_layers - 1 or len(self.ln_bias) != n_layers - 1):
            raise ConfigError("layer norm needs gain and bias for every hidden layer")
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise ValueError("model parameters must be finite")

    @property
    def layer_norm(self) -> bool:
        return bool(self.ln_gain)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order: weights, biases, ln gains, ln biases."""
        return [*self.weights, *self.biases, *self.ln_gain, *self.ln_bias]

    def with_params(self, params: Sequence[np.ndarray]) -> PayoffModel:
        n = len(self.weights)
        k = len(self.ln_gain)
        params = list(params)
        return replace(
            self,
            weights=tuple(params[:n]),
            biases=tuple(params[n : 2 * n]),
            ln_gain=tuple(params[2 * n : 2 * n + k]),
            ln_bias=tuple(params[2 * n + k :]),
        )

    def weight_mask(self) -> list[bool]:
        """True for entries of ``params()`` that are weight matrices (the regularized ones)."""
        return [True] * len(self.weights) + [False] * (len(self.params()) - len(self.weights))


def init_model(
    layer_dims: Sequence[int],
    rng: np.random.Generator,
    layer_norm: bool = False,
    q_bound: float = 0.45,
) -> PayoffModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases."""
    dims = tuple(layer_dims)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    hidden = dims[1:-1]
    gains = tuple(np.ones(h) for h in hidden) if layer_norm else ()
    shifts = tuple(np.zeros(h) for h in hidden) if layer_norm else ()
    return PayoffModel(dims, tuple(weights), tuple(biases), gains, shifts, q_bound)


def zero_model(layer_dims: Sequence[int], layer_norm: bool = False, q_bound: float = 0.45) -> PayoffModel:
    dims = tuple(layer_dims)
    weights = tuple(np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:]))
    biases = tuple(np.zeros(b) for b in dims[1:])
    gains = tuple(np.ones(h) for h in dims[1:-1]) if layer_norm else ()
    shifts = tuple(np.zeros(h) for h in dims[1:-1]) if layer_norm else ()
    return PayoffModel(dims, weights, biases, gains, shifts, q_bound)


@dataclass(frozen=True, eq=False)
class GradientBundle:
    """Gradients laid out exactly like ``PayoffModel.params()``."""

    arrays: tuple[np.ndarray, ...]

    def __iter__(self):
        return iter(self.arrays)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays]) if self.arrays else np.zeros(0)

    @classmethod
    def zeros_like(cls, model: PayoffModel) -> GradientBundle:
        return cls(tuple(np.zeros_like(p) for p in model.params()))


# -- forward / backward -----------------------------------------------------------


def _forward_raw(model: PayoffModel, x: np.ndarray):
    """Pre-squash network output for rows of ``x`` and the cache needed by backprop."""
    cache = []
    a = x
    n_hidden = len(model.weights) - 1
    for i in range(n_hidden):
        h = a @ model.weights[i]
        h += model.biases[i]
        if model.layer_norm:
            # row means through mat-vecs: much faster than reductions over a narrow axis
            avg = np.full(h.shape[1], 1.0 / h.shape[1])
            h -= (h @ avg)[:, None]
            inv_std = 1.0 / np.sqrt((h * h) @ avg + LN_EPS)
            h *= inv_std[:, None]
            xhat = h
            pre = xhat * model.ln_gain[i]
            pre += model.ln_bias[i]
        else:
            xhat = inv_std = None
            pre = h
        cache.append((a, xhat, inv_std, pre))
        a = np.maximum(pre, 0.0)
    raw = a @ model.weights[-1][:, 0] + model.biases[-1][0]
    cache.append((a, None, None, None))
    return raw, cache


def _backward(model: PayoffModel, cache, d_raw: np.ndarray) -> GradientBundle:
    n_layers = len(model.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    ggain = [None] * len(model.ln_gain)
    gshift = [None] * len(model.ln_bias)
    a_last = cache[-1][0]
    gw[-1] = (d_raw @ a_last)[:, None]
    gb[-1] = np.array([d_raw.sum()])
    da = d_raw[:, None] * model.weights[-1][:, 0]
    ones = np.ones(len(d_raw))
    for i in range(n_layers - 2, -1, -1):
        a_in, xhat, inv_std, pre = cache[i]
        dpre = da
        np.multiply(dpre, pre > 0.0, out=dpre)
        if model.layer_norm:
            avg = np.full(dpre.shape[1], 1.0 / dpre.shape[1])
            ggain[i] = ones @ (dpre * xhat)
            gshift[i] = ones @ dpre
            dxhat = dpre * model.ln_gain[i]
            dh = dxhat
            dh -= (dxhat @ avg)[:, None] + xhat * ((dxhat * xhat) @ avg)[:, None]
            dh *= inv_std[:, None]
        else:
            dh = dpre
        gw[i] = a_in.T @ dh
        gb[i] = ones @ dh
        if i > 0:
            da = dh @ model.weights[i].T
    return GradientBundle(tuple(gw + gb + ggain + gshift))


def _squash(model: PayoffModel, raw: np.ndarray) -> np.ndarray:
    q = model.q_bound
    # q * (2 * logistic(raw) - 1); clipped so saturation never reaches +-q exactly
    inner = np.nextafter(q, 0.0)
    return np.clip(q * np.tanh(0.5 * raw), -inner, inner)


def _squash_grad(model: PayoffModel, raw: np.ndarray) -> np.ndarray:
    th = np.tanh(0.5 * raw)
    return 0.5 * model.q_bound * (1.0 - th * th)


def forward_rows(model: PayoffModel, x: np.ndarray) -> np.ndarray:
    """Bounded payoff g(x) for each row of a 2-D input array."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ConfigError(f"model expects inputs of width {model.input_dim}, got shape {x.shape}")
    raw, _ = _forward_raw(model, x)
    return _squash(model, raw)


def forward(model: PayoffModel, w) -> float:
    """Payoff for a single model input (an Observation or array, flattened)."""
    data = getattr(w, "data", w)
    flat = np.asarray(data, dtype=np.float64).reshape(1, -1)
    return float(forward_rows(model, flat)[0])


# -- objective ----------------------------------------------------------------------


def _as_set(ops) -> OperatorSet:
    if isinstance(ops, OperatorSet):
        return ops
    if isinstance(ops, Operator):
        return OperatorSet([ops])
    return OperatorSet(list(ops))


def _objective(model, data: np.ndarray, tag: Tag, set1, set2, variant: str, need_grad: bool):
    set1, set2 = _as_set(set1), _as_set(set2)
    if variant not in LOSS_VARIANTS:
        raise ConfigError(f"loss variant must be one of {LOSS_VARIANTS}, got {variant!r}")
    n = data.shape[0]
    if n == 0:
        return 0.0, (GradientBundle.zeros_like(model) if need_grad else None)
    k1, k2 = len(set1), len(set2)
    rows = [model_inputs(op, data, tag) for op in (*set1, *set2)]
    raw, cache = _forward_raw(model, np.concatenate(rows))
    r1 = raw[: k1 * n].reshape(k1, n)
    r2 = raw[k1 * n :].reshape(k2, n)
    q = model.q_bound
    if variant == "plain":
        pay = _squash(model, r1).mean(axis=0) - _squash(model, r2).mean(axis=0)
    else:
        diff = r1[:, None, :] - r2[None, :, :]
        th = np.tanh(diff)
        pay = (q * th).mean(axis=(0, 1))
    value = float(np.log1p(pay).sum())
    if not need_grad:
        return value, None
    dpay = 1.0 / (1.0 + pay)
    if variant == "plain":
        dr1 = dpay / k1 * _squash_grad(model, r1)
        dr2 = -dpay / k2 * _squash_grad(model, r2)
    else:
        dd = dpay * q * (1.0 - th * th) / (k1 * k2)
        dr1 = dd.sum(axis=1)
        dr2 = -dd.sum(axis=0)
    return value, _backward(model, cache, np.concatenate([dr1.ravel(), dr2.ravel()]))


def _data_of(data) -> tuple[np.ndarray, Tag]:
    if isinstance(data, Batch):
        return data.data, data.tag
    if isinstance(data, (list, tuple)):
        if not data:
            return np.zeros((0,)), Tag.PLAIN
        if isinstance(data[0], Batch):
            merged = concat_batches(list(data))
            return merged.data, merged.tag
        merged = Batch.from_observations(list(data))
        return merged.data, merged.tag
    raise TypeError(f"cannot interpret {type(data).__name__} as observations")


def batch_objective(model: PayoffModel, data, t1, t2, variant: str = "plain") -> float:
    """Sum of log(1 + payoff) over observations.

    ``t1``/``t2`` may be single operators or operator sets; with sets the payoff
    is averaged over all pairs. The sigma variant replaces the payoff by
    ``q * tanh`` of the pre-squash score difference.
    """
    arr, tag = _data_of(data)
    return _objective(model, arr, tag, t1, t2, variant, need_grad=False)[0]


def objective_gradient(model: PayoffModel, data, t1, t2, variant: str = "plain") -> GradientBundle:
    arr, tag = _data_of(data)
    return _objective(model, arr, tag, t1, t2, variant, need_grad=True)[1]


def regularization(model: PayoffModel, l1: float, l2: float) -> float:
    total = 0.0
    for w in model.weights:
        total += l1 * float(np.abs(w).sum()) + l2 * float((w * w).sum())
    return total


def regularized_objective_and_gradient(
    model: PayoffModel, data, t1, t2, variant: str = "plain", l1: float = 0.0, l2: float = 0.0
) -> tuple[float, GradientBundle]:
    """The quantity the optimizer ascends: objective minus l1/l2 weight penalties."""
    arr, tag = _data_of(data)
    value, grads = _objective(model, arr, tag, t1, t2, variant, need_grad=True)
    return _penalize(model, value, grads, l1, l2)


def _penalize(model, value, grads, l1, l2):
    if l1 == 0.0 and l2 == 0.0:
        return value, grads
    arrays = list(grads.arrays)
    for i, w in enumerate(model.weights):
        arrays[i] = arrays[i] - l1 * np.sign(w) - 2.0 * l2 * w
    return value - regularization(model, l1, l2), GradientBundle(tuple(arrays))


# -- optimisation -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0

    @classmethod
    def for_model(cls, model: PayoffModel) -> AdamState:
        zeros = tuple(np.zeros_like(p) for p in model.params())
        return cls(zeros, tuple(np.zeros_like(p) for p in model.params()), 0)


def adam_step(model: PayoffModel, grads: GradientBundle, state: AdamState, lr: float):
    """One Adam update that ascends the objective whose gradient is ``grads``."""
    step = state.step + 1
    c1 = 1.0 - ADAM_BETA1**step
    c2 = 1.0 - ADAM_BETA2**step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(model.params(), grads.arrays, state.m, state.v):
        g = -g  # descent form on the negated objective
        m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
        new_params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS))
        new_m.append(m)
        new_v.append(v)
    return model.with_params(new_params), AdamState(tuple(new_m), tuple(new_v), step)


@dataclass(frozen=True)
class TrainingParams:
    learning_rate: float = 5e-4
    max_epochs: int = 500
    patience: int = 10
    loss_variant: str = "plain"
    l1_coeff: float = 0.0
    l2_coeff: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if int(self.max_epochs) != self.max_epochs or self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be a nonnegative integer, got {self.max_epochs}")
        if int(self.patience) != self.patience or self.patience < 1:
            raise ConfigError(f"patience must be a positive integer, got {self.patience}")
        if self.max_epochs > 0 and self.patience > self.max_epochs:
            raise ConfigError("patience cannot exceed max_epochs")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.l1_coeff < 0 or self.l2_coeff < 0:
            raise ConfigError("regularization coefficients must be nonnegative")


# objective(model, batches, need_grad) -> (value, gradient or None)
Objective = Callable[[PayoffModel, Sequence[Batch], bool], tuple[float, "GradientBundle | None"]]


@dataclass(frozen=True, eq=False)
class TrainingOutcome:
    model: PayoffModel
    epochs_run: int
    best_epoch: int
    validation_history: tuple[float, ...] = field(default=())
    diverged: bool = False


def operator_objective(t1, t2, variant: str = "plain") -> Objective:
    def objective(model, batches, need_grad=True):
        arr, tag = _data_of(list(batches))
        return _objective(model, arr, tag, t1, t2, variant, need_grad)

    return objective


def train_model(
    model: PayoffModel,
    batches: Sequence[Batch],
    params: TrainingParams,
    t1=None,
    t2=None,
    objective: Objective | None = None,
) -> TrainingOutcome:
    """Full-batch Adam ascent with early stopping on the last batch.

    With two or more batches the last one is held out for validation and the
    best-validation snapshot (the starting point counts as epoch 0) is returned.
    With a single batch, training runs for ``max_epochs`` without early stopping.
    """
    if objective is None:
        if t1 is None or t2 is None:
            raise ConfigError("either operators or an objective must be given")
        objective = operator_objective(t1, t2, params.loss_variant)
    batches = list(batches)
    if params.max_epochs == 0 or not batches:
        return TrainingOutcome(model, 0, 0)
    l1, l2 = params.l1_coeff, params.l2_coeff
    train, val = (batches[:-1], batches[-1:]) if len(batches) >= 2 else (batches, None)

    def val_score(m):
        return objective(m, val, False)[0]

    best = model
    best_epoch = 0
    best_val = val_score(model) if val is not None else -math.inf
    history = [best_val] if val is not None else []
    state = AdamState.for_model(model)
    current = model
    stale = 0
    diverged = False
    epoch = 0
    for epoch in range(1, params.max_epochs + 1):
        value, grads = _penalize(current, *objective(current, train, True), l1, l2)
        if not (math.isfinite(value) and np.all(np.isfinite(grads.flat()))):
            diverged = True
            break
        try:
            candidate, new_state = adam_step(current, grads, state, params.learning_rate)
        except ValueError:
            diverged = True
            break
        current, state = candidate, new_state
        if val is None:
            best, best_epoch = current, epoch
            continue
        score = val_score(current)
        if not math.isfinite(score):
            diverged = True
            break
        history.append(score)
        if score > best_val:
            best, best_val, best_epoch, stale = current, score, epoch, 0
        else:
            stale += 1
            if stale >= params.patience:
                break
    if diverged:
        log.warning("training diverged at epoch %d; restoring last finite snapshot", epoch)
    return TrainingOutcome(best, epoch, best_epoch, tuple(history), diverged)


def update_model(
    model: PayoffModel,
    batches: Sequence[Batch],
    params: TrainingParams,
    t1=None,
    t2=None,
    objective: Objective | None = None,
) -> PayoffModel:
    return train_model(model, batches, params, t1, t2, objective).model


# -- diagnostics ----------------------------------------------------------------------


def growth_constant(q_bound: float) -> float:
    """c = 2 log(1 / (1 - 2q)), the range constant of log(1 + payoff)."""
    return 2.0 * math.log(1.0 / (1.0 - 2.0 * q_bound))


@dataclass(frozen=True)
class GrowthDiagnostic:
    estimate: float
    threshold: float

    @property
    def satisfied(self) -> bool:
        return self.estimate > self.threshold


def growth_threshold(q_bound: float, n_seen: int) -> float:
    """2c sqrt(log(n) / n) for n = t * b observations seen."""
    if n_seen <= 1:
        return 0.0
    return 2.0 * growth_constant(q_bound) * math.sqrt(math.log(n_seen) / n_seen)


def growth_rate_estimate(model: PayoffModel, holdout, t1, t2, n_seen: int | None = None) -> GrowthDiagnostic:
    """Mean log(1 + payoff) on held-out data next to the consistency threshold."""
    arr, tag = _data_of(holdout)
    if arr.shape[0] == 0:
        raise ValueError("holdout must be non-empty")
    value = _objective(model, arr, tag, t1, t2, "plain", need_grad=False)[0] / arr.shape[0]
    n = arr.shape[0] if n_seen is None else n_seen
    return GrowthDiagnostic(value, growth_threshold(model.q_bound, n))


# -- serialization --------------------------------------------------------------------


def model_to_bytes(model: PayoffModel) -> bytes:
    """JSON header line followed by the parameters as little-endian float64."""
    header = {
        "layer_dims": list(model.layer_dims),
        "layer_norm": model.layer_norm,
        "q_bound": model.q_bound,
        "activation": model.activation,
    }
    flat = np.concatenate([p.ravel() for p in model.params()]).astype("<f8")
    head = json.dumps(header, sort_keys=True).encode()
    return struct.pack("<I", len(head)) + head + flat.tobytes()


def model_from_bytes(blob: bytes) -> PayoffModel:
    (n,) = struct.unpack("<I", blob[:4])
    header = json.loads(blob[4 : 4 + n])
    flat = np.frombuffer(blob[4 + n :], dtype="<f8").astype(np.float64)
    template = zero_model(header["layer_dims"], header["layer_norm"], header["q_bound"])
    params, pos = [], 0
    for p in template.params():
        params.append(flat[pos : pos + p.size].reshape(p.shape))
        pos += p.size
    if pos != flat.size:
        raise ValueError("parameter payload does not match the header's layer_dims")
    return template.with_params(params)
