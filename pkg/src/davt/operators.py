"""Operators defining null hypotheses, operator sets and payoff differences.

An operator maps observations to the input space of a payoff model. Every
operator here is a pure index permutation or projection (plus sign flips), so
all of them act exactly on floating point data.

``compose(f, g)`` follows mathematical order: ``g`` is applied first.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Batch, Observation, Tag

KINDS = ("identity", "swap", "project_first", "rotate", "cross_swap", "negate", "compose")
ANGLES = (0, 90, 180, 270, 360)

_PAIRED = {
    Tag.PAIR: Tag.PLAIN,
    Tag.AUGMENTED_CIT_PAIR: Tag.CIT_TRIPLE,
    Tag.PAIR_OF_PAIRS: Tag.PAIR,
}


class OperatorError(ValueError):
    """Raised when an operator is applied to an observation it does not accept."""


@dataclass(frozen=True)
class Operator:
    kind: str
    angle: int | None = None
    ops: tuple[Operator, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OperatorError(f"unknown operator kind {self.kind!r}")
        if self.kind == "rotate" and self.angle not in ANGLES:
            raise OperatorError(f"rotation angle must be one of {ANGLES}, got {self.angle}")
        if self.kind == "compose" and not self.ops:
            raise OperatorError("compose needs at least one operator")
        object.__setattr__(self, "ops", tuple(self.ops))

    # -- shape/tag bookkeeping -------------------------------------------------
    def output_signature(self, tag: Tag, shape: tuple[int, ...]) -> tuple[Tag, tuple[int, ...]]:
        """Tag and shape produced for an input of ``tag``/``shape``; raises if not accepted."""
        tag = Tag(tag)
        shape = tuple(shape)
        if self.kind in ("identity", "negate"):
            return tag, shape
        if self.kind == "swap":
            self._need(tag in _PAIRED and shape[:1] == (2,), tag, shape)
            return tag, shape
        if self.kind == "project_first":
            self._need(tag in _PAIRED and shape[:1] == (2,), tag, shape)
            return _PAIRED[tag], shape[1:]
        if self.kind == "cross_swap":
            self._need(tag is Tag.PAIR_OF_PAIRS and shape[:2] == (2, 2), tag, shape)
            return tag, shape
        if self.kind == "rotate":
            self._need(tag is Tag.PLAIN and len(shape) == 2 and shape[0] == shape[1], tag, shape)
            return tag, shape
        for op in reversed(self.ops):
            tag, shape = op.output_signature(tag, shape)
        return tag, shape

    def _need(self, ok: bool, tag: Tag, shape) -> None:
        if not ok:
            raise OperatorError(f"{self.describe()} does not accept {tag.value} observations of shape {shape}")

    # -- application -----------------------------------------------------------
    def apply_array(self, data: np.ndarray, tag: Tag) -> np.ndarray:
        """Apply to a stack of observations (axis 0 indexes observations)."""
        self.output_signature(tag, data.shape[1:])
        return self._apply(np.asarray(data, dtype=np.float64), Tag(tag))

    def _apply(self, data: np.ndarray, tag: Tag) -> np.ndarray:
        kind = self.kind
        if kind == "identity":
            return data
        if kind == "negate":
            return -data
        if kind == "swap":
            return data[:, ::-1]
        if kind == "project_first":
            return data[:, 0]
        if kind == "cross_swap":
            out = data.copy()
            out[:, 0, 1] = data[:, 1, 1]
            out[:, 1, 1] = data[:, 0, 1]
            return out
        if kind == "rotate":
            # counterclockwise quarter turns on the (row, col) grid
            return np.rot90(data, k=(self.angle // 90) % 4, axes=(1, 2))
        for op in reversed(self.ops):
            next_tag, _ = op.output_signature(tag, data.shape[1:])
            data = op._apply(data, tag)
            tag = next_tag
        return data

    def __call__(self, z: Observation) -> Observation:
        return apply(self, z)

    # -- serialization ---------------------------------------------------------
    def to_dict(self) -> dict:
        if self.kind == "rotate":
            return {"kind": "rotate", "angle": self.angle}
        if self.kind == "compose":
            return {"kind": "compose", "ops": [op.to_dict() for op in self.ops]}
        return {"kind": self.kind}

    def describe(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> Operator:
        if not isinstance(d, dict) or "kind" not in d:
            raise OperatorError(f"operator descriptor needs a 'kind': {d!r}")
        allowed = {"kind", "angle"} if d["kind"] == "rotate" else {"kind", "ops"} if d["kind"] == "compose" else {"kind"}
        extra = set(d) - allowed
        if extra:
            raise OperatorError(f"unexpected keys {sorted(extra)} in operator descriptor")
        if d["kind"] == "compose":
            return cls("compose", ops=tuple(cls.from_dict(o) for o in d.get("ops", [])))
        return cls(d["kind"], angle=d.get("angle"))


IDENTITY = Operator("identity")
SWAP = Operator("swap")
PROJECT_FIRST = Operator("project_first")
CROSS_SWAP = Operator("cross_swap")
NEGATE = Operator("negate")


def rotate(angle: int) -> Operator:
    return Operator("rotate", angle=angle)


def compose(*ops: Operator) -> Operator:
    return Operator("compose", ops=tuple(ops))


PROJECT_SWAP = compose(PROJECT_FIRST, SWAP)


def apply(op: Operator, z: Observation) -> Observation:
    out_tag, _ = op.output_signature(z.tag, z.shape)
    out = op._apply(z.data[None], z.tag)[0]
    return Observation(np.array(out), out_tag)


def apply_batch(op: Operator, batch: Batch) -> Batch:
    out_tag, _ = op.output_signature(batch.tag, batch.shape)
    return Batch(op._apply(batch.data, batch.tag), out_tag, batch.groups)


def project_first(z: Observation) -> Observation:
    if z.tag is not Tag.PAIR:
        raise OperatorError(f"project_first expects a pair observation, got {z.tag.value}")
    return apply(PROJECT_FIRST, z)


def pair_consecutive(batch: Batch) -> Batch:
    """Join observations 2k and 2k+1 into one pair-of-pairs; a trailing odd element is dropped."""
    if batch.tag is not Tag.PAIR:
        raise OperatorError("only pair observations can be joined into pairs of pairs")
    m = len(batch) // 2
    if m == 0:
        raise OperatorError("need at least two pair observations")
    data = batch.data[: 2 * m].reshape((m, 2) + batch.shape)
    return Batch(data, Tag.PAIR_OF_PAIRS)


@dataclass(frozen=True)
class OperatorSet:
    members: tuple[Operator, ...]

    def __init__(self, members: Sequence[Operator]):
        members = tuple(members)
        if not members:
            raise OperatorError("an operator set needs at least one member")
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def descriptors(self) -> list[str]:
        return [op.describe() for op in self.members]

    def to_list(self) -> list[dict]:
        return [op.to_dict() for op in self.members]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> OperatorSet:
        return cls([Operator.from_dict(d) for d in items])


def check_disjoint(set1: OperatorSet, set2: OperatorSet) -> None:
    shared = set(set1.descriptors()) & set(set2.descriptors())
    if shared:
        raise OperatorError(f"operator sets must be disjoint; both contain {sorted(shared)}")


def model_inputs(op: Operator, data: np.ndarray, tag: Tag) -> np.ndarray:
    """Operator outputs flattened to model input rows."""
    out = op.apply_array(data, tag)
    return out.reshape(out.shape[0], -1)


def payoff_difference(model, z: Observation, t1: Operator, t2: Operator) -> float:
    """g(T1 z) - g(T2 z) for one observation."""
    return float(payoff_differences(model, z.data[None], z.tag, t1, t2)[0])


def payoff_differences(model, data: np.ndarray, tag: Tag, t1: Operator, t2: Operator) -> np.ndarray:
    from .learner import forward_rows

    return forward_rows(model, model_inputs(t1, data, tag)) - forward_rows(model, model_inputs(t2, data, tag))


def averaged_payoff(model, z: Observation, set1: OperatorSet, set2: OperatorSet) -> float:
    """Mean of payoff differences over every pair in set1 x set2."""
    return float(averaged_payoffs(model, z.data[None], z.tag, set1, set2)[0])


def averaged_payoffs(model, data: np.ndarray, tag: Tag, set1: OperatorSet, set2: OperatorSet) -> np.ndarray:
    from .learner import forward_rows

    if len(set1) == 0 or len(set2) == 0:
        raise OperatorError("operator sets must be non-empty")
    g1 = np.mean([forward_rows(model, model_inputs(op, data, tag)) for op in set1], axis=0)
    g2 = np.mean([forward_rows(model, model_inputs(op, data, tag)) for op in set2], axis=0)
    return g1 - g2
