"""Relation classifier: a 2-hidden-layer MLP over concatenated pair features.

Trained on the grounded dataset with cross-entropy; at inference every
ordered object pair is scored and the per-pair softmax expands into
ranked (pair, class) candidates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .captioner import GroundedExample
from .errors import ConfigError, NumericalError, ShapeError
from .kernel import (
    AdamState,
    Tensor,
    adam_step,
    add,
    backward,
    clip_global_norm,
    cross_entropy_with_logits,
    dropout,
    matmul,
    mean,
    no_grad,
    parameter,
    relu,
    save_checkpoint,
    load_checkpoint,
)
from .kernel.layers import init_uniform
from .util import rng_stream, stable_fraction

_INIT, _SHUFFLE, _DROPOUT = 20, 21, 22


@dataclass(frozen=True)
class RelClfConfig:
    hidden: tuple[int, int] = (64, 64)
    dropout: float = 0.5
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    val_fraction: float = 0.15
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("bad relclf epochs/batch size")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError("val_fraction must be in [0, 1)")


class RelClfParams:
    def __init__(self, w1, b1, w2, b2, w_out, b_out, dropout_rate: float):
        self.w1, self.b1 = w1, b1
        self.w2, self.b2 = w2, b2
        self.w_out, self.b_out = w_out, b_out
        self.dropout_rate = dropout_rate

    @classmethod
    def init(
        cls, rng: np.random.Generator, feature_dim: int, num_relations: int, config: RelClfConfig
    ) -> "RelClfParams":
        h1, h2 = config.hidden
        pair_dim = 2 * feature_dim
        return cls(
            w1=parameter(init_uniform(rng, pair_dim, (pair_dim, h1))),
            b1=parameter(np.zeros(h1)),
            w2=parameter(init_uniform(rng, h1, (h1, h2))),
            b2=parameter(np.zeros(h2)),
            w_out=parameter(init_uniform(rng, h2, (h2, num_relations))),
            b_out=parameter(np.zeros(num_relations)),
            dropout_rate=config.dropout,
        )

    @property
    def feature_dim(self) -> int:
        return self.w1.shape[0] // 2

    @property
    def num_relations(self) -> int:
        return self.w_out.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "w1": self.w1, "b1": self.b1,
            "w2": self.w2, "b2": self.b2,
            "w_out": self.w_out, "b_out": self.b_out,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], dropout_rate: float = 0.5) -> "RelClfParams":
        return cls(*(parameter(arrays[k]) for k in ("w1", "b1", "w2", "b2", "w_out", "b_out")),
                   dropout_rate=dropout_rate)


def relclf_forward(
    params: RelClfParams,
    subject_features: np.ndarray,
    object_features: np.ndarray,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Logits over relation classes for a batch of ordered feature pairs."""
    subject_features = np.atleast_2d(subject_features)
    object_features = np.atleast_2d(object_features)
    if subject_features.shape != object_features.shape:
        raise ShapeError("subject/object feature batches differ in shape")
    if subject_features.shape[1] != params.feature_dim:
        raise ShapeError(
            f"feature dim {subject_features.shape[1]} != classifier dim {params.feature_dim}"
        )
    if train_mode and rng is None:
        raise ConfigError("train_mode forward needs an rng for dropout masks")
    x = Tensor(np.concatenate([subject_features, object_features], axis=1))
    h = relu(add(matmul(x, params.w1), params.b1))
    h = dropout(h, params.dropout_rate, rng, train_mode)
    h = relu(add(matmul(h, params.w2), params.b2))
    h = dropout(h, params.dropout_rate, rng, train_mode)
    return add(matmul(h, params.w_out), params.b_out)


def split_by_scene(
    examples: Sequence[GroundedExample], val_fraction: float, seed: int
) -> tuple[list[GroundedExample], list[GroundedExample]]:
    """Deterministic scene-hash split; keeps all tuples of a scene together."""
    train, val = [], []
    for ex in examples:
        if stable_fraction("relclf-split", seed, ex.scene_id) < val_fraction:
            val.append(ex)
        else:
            train.append(ex)
    return train, val


def _accuracy(params: RelClfParams, examples: Sequence[GroundedExample], batch_size: int = 512) -> float:
    if not examples:
        return float("nan")
    hits = 0
    with no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            subj = np.stack([e.subject_feature for e in chunk])
            obj = np.stack([e.object_feature for e in chunk])
            logits = relclf_forward(params, subj, obj, train_mode=False)
            labels = np.array([e.relation for e in chunk])
            hits += int((logits.data.argmax(axis=1) == labels).sum())
    return hits / len(examples)


@dataclass
class RelClfHistory:
    losses: list[float]
    train_accuracy: list[float]
    val_accuracy: list[float]


def train_relclf(
    examples: Sequence[GroundedExample], num_relations: int, config: RelClfConfig
) -> tuple[RelClfParams, RelClfHistory]:
    """Cross-entropy training with a scene-held-out validation split."""
    if not examples:
        raise ConfigError("empty grounded dataset")
    train, val = split_by_scene(examples, config.val_fraction, config.seed)
    if not train:
        raise ConfigError("no training examples left after the validation split")
    feature_dim = train[0].subject_feature.shape[0]

    params = RelClfParams.init(rng_stream(config.seed, _INIT), feature_dim, num_relations, config)
    tensors = params.tensors()
    state = AdamState.init(tensors)
    dropout_rng = rng_stream(config.seed, _DROPOUT)

    history = RelClfHistory(losses=[], train_accuracy=[], val_accuracy=[])
    for epoch in range(config.epochs):
        order = rng_stream(config.seed, _SHUFFLE, epoch).permutation(len(train))
        epoch_sum = 0.0
        try:
            for start in range(0, len(order), config.batch_size):
                chunk = [train[i] for i in order[start : start + config.batch_size]]
                subj = np.stack([e.subject_feature for e in chunk])
                obj = np.stack([e.object_feature for e in chunk])
                labels = np.array([e.relation for e in chunk])
                logits = relclf_forward(params, subj, obj, train_mode=True, rng=dropout_rng)
                loss = mean(cross_entropy_with_logits(logits, labels))
                backward(loss)
                grads = {name: t.grad for name, t in tensors.items()}
                clip_global_norm(grads, config.clip_norm)
                adam_step(tensors, grads, state, config.lr)
                epoch_sum += float(loss.data) * len(chunk)
        except NumericalError as exc:
            raise NumericalError(f"relclf training diverged at epoch {epoch}: {exc}") from exc
        history.losses.append(epoch_sum / len(train))
        history.train_accuracy.append(_accuracy(params, train))
        history.val_accuracy.append(_accuracy(params, val))
    return params, history


@dataclass(frozen=True)
class PredictionEntry:
    subject: int
    object: int
    relation: int
    confidence: float

    def key(self) -> tuple[int, int, int]:
        return (self.subject, self.relation, self.object)


@dataclass(frozen=True)
class PredictionList:
    """All n(n-1)C scored candidates of one scene, confidence-descending;
    ties break on (subject, object, class)."""

    entries: tuple[PredictionEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def top(self, k: int) -> tuple[PredictionEntry, ...]:
        return self.entries[:k]


def predict_relations(params: RelClfParams, features: np.ndarray) -> PredictionList:
    """Score every ordered object pair for every relation class."""
    features = np.atleast_2d(features)
    n = features.shape[0]
    if n < 2:
        return PredictionList(entries=())
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    subj = features[[i for i, _ in pairs]]
    obj = features[[j for _, j in pairs]]
    with no_grad():
        logits = relclf_forward(params, subj, obj, train_mode=False).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)

    entries = [
        PredictionEntry(subject=i, object=j, relation=c, confidence=float(probs[p, c]))
        for p, (i, j) in enumerate(pairs)
        for c in range(params.num_relations)
    ]
    entries.sort(key=lambda e: (-e.confidence, e.subject, e.object, e.relation))
    return PredictionList(entries=tuple(entries))


def save_relclf(path, params: RelClfParams) -> None:
    save_checkpoint(path, params.tensors())


def load_relclf(path, dropout_rate: float = 0.5) -> RelClfParams:
    return RelClfParams.from_arrays(load_checkpoint(path), dropout_rate=dropout_rate)
