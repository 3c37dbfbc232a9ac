"""Two-phase fine-tuning and the evaluation artifacts.

Phase A trains only the (freshly replaced) head at a fixed rate with the
backbone frozen; phase B unfreezes everything and applies a
discriminative learning-rate slice across the layer groups. Records
mirror the familiar per-epoch table: train loss, valid loss, accuracy,
wall time.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .checkpoint import save_checkpoint
from .errors import ConfigError, DatasetError, DivergenceError
from .model import set_frozen
from .optim import OptimizerState, constant_schedule, discriminative_lrs, step
from .tensor import backward, per_item_cross_entropy, softmax_probs

LOSS_ABORT_THRESHOLD = 1e4


@dataclass(frozen=True)
class PhaseConfig:
    """One training phase: either a fixed rate or a (min, max) slice.

    A scalar ``lr`` expands to the same rate for every group; a pair is
    interpolated geometrically across groups (smallest rate at the input
    end by default).
    """

    epochs: int
    lr: object
    frozen_groups: frozenset = frozenset()
    batch_size: int = 64
    train_bn: bool = False
    lr_direction: str = "early_low"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.is_slice():
            lo, hi = self.lr
            if lo > hi:
                raise ConfigError(f"slice lr_min {lo} exceeds lr_max {hi}")
            if lo < 0:
                raise ConfigError(f"slice rates must be non-negative, got {lo}")
        elif self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")

    def is_slice(self):
        return isinstance(self.lr, (tuple, list))

    def schedule(self, num_groups):
        if not self.is_slice():
            return constant_schedule(float(self.lr), num_groups)
        lo, hi = (float(v) for v in self.lr)
        if hi == 0.0:
            return constant_schedule(0.0, num_groups)
        return discriminative_lrs(lo, hi, num_groups, self.lr_direction)


@dataclass(frozen=True)
class TransferRecipe:
    """The paper-style two-phase procedure with its stock defaults."""

    phase_a: PhaseConfig
    phase_b: PhaseConfig
    checkpoint_dir: str = None


def default_recipe(num_groups=3, batch_size=64, checkpoint_dir=None):
    """Head-only 4 epochs at 3e-3, then 3 unfrozen epochs at slice(1e-5, 1e-4)."""
    backbone = frozenset(range(num_groups - 1))
    return TransferRecipe(
        phase_a=PhaseConfig(epochs=4, lr=3e-3, frozen_groups=backbone,
                            batch_size=batch_size),
        phase_b=PhaseConfig(epochs=3, lr=(1e-5, 1e-4), frozen_groups=frozenset(),
                            batch_size=batch_size),
        checkpoint_dir=checkpoint_dir,
    )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    accuracy: float
    wall_seconds: float


@dataclass
class DataSpec:
    """Everything the trainer needs to turn a manifest into batches."""

    manifest: D.DatasetManifest
    image_size: int = 64
    augment: D.AugmentConfig = field(default_factory=D.AugmentConfig)
    preset: D.NormalizationPreset = D.IMAGENET


@dataclass
class ConfusionMatrix:
    """Rows are actual classes, columns predicted; trace/total is accuracy."""

    class_names: list
    counts: np.ndarray

    @classmethod
    def from_counts(cls, class_names, counts):
        arr = np.asarray(counts, dtype=np.int64)
        k = len(class_names)
        if arr.shape != (k, k):
            raise ConfigError(f"counts must be {k}x{k}, got {arr.shape}")
        return cls(list(class_names), arr)

    @property
    def trace(self):
        return int(np.trace(self.counts))

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return self.trace / self.total

    def row(self, class_name):
        return self.counts[self.class_names.index(class_name)]


@dataclass
class TopLossEntry:
    actual: str
    predicted: str
    loss: float
    probability: float
    path: str


# ---------------------------------------------------------------------------
# training

def train_phase(model, state, data: DataSpec, phase: PhaseConfig, seed,
                phase_tag=0):
    """Run one phase and return one record per epoch.

    Applies the phase's freeze set, iterates shuffled augmented training
    batches, and evaluates the validation split after each epoch. An
    all-zero schedule runs no steps and returns no records, leaving the
    model bit-identical. Non-finite or exploding loss aborts.
    """
    set_frozen(model, phase.frozen_groups, train_bn=phase.train_bn)
    schedule = phase.schedule(model.num_groups)
    if not any(schedule.per_group_lrs):
        return []
    records = []
    for epoch in range(phase.epochs):
        t0 = time.perf_counter()
        batches = D.make_batches(
            data.manifest, "train", batch_size=phase.batch_size,
            image_size=data.image_size, preset=data.preset,
            augment_cfg=data.augment, seed=(seed, phase_tag), epoch=epoch)
        batch_losses = []
        for i, batch in enumerate(D.maybe_prefetch(batches)):
            loss = model.loss_on_batch(batch, training=True)
            value = loss.item()
            if not math.isfinite(value) or value > LOSS_ABORT_THRESHOLD:
                raise DivergenceError(
                    f"loss {value} at phase {phase_tag} epoch {epoch} iteration {i}")
            backward(loss)
            step(model, state, schedule)
            batch_losses.append(value)
        # plain mean over the epoch's batches, not item-weighted
        train_loss = float(np.mean(batch_losses))
        valid_loss, accuracy = evaluate(model, data, "valid")
        records.append(EpochRecord(epoch, train_loss, valid_loss, accuracy,
                                   time.perf_counter() - t0))
    return records


def fine_tune(model, data: DataSpec, recipe: TransferRecipe, seed):
    """Phase A then phase B; returns (model, concatenated records).

    Phase B continues from the final phase-A weights with a fresh
    optimizer. When a checkpoint directory is set, ``phaseA.lfck`` and
    ``phaseB.lfck`` are written as each phase ends.
    """
    records = []
    for tag, phase in ((0, recipe.phase_a), (1, recipe.phase_b)):
        state = OptimizerState()
        records += train_phase(model, state, data, phase, seed, phase_tag=tag)
        if recipe.checkpoint_dir is not None:
            name = "phaseA.lfck" if tag == 0 else "phaseB.lfck"
            save_checkpoint(model, state, f"{recipe.checkpoint_dir}/{name}",
                            phase_info=_phase_info(phase, data))
    return model, records


def _phase_info(phase: PhaseConfig, data: DataSpec):
    lr = list(phase.lr) if phase.is_slice() else phase.lr
    return {
        "epochs": phase.epochs,
        "lr": lr,
        "frozen_groups": sorted(phase.frozen_groups),
        "batch_size": phase.batch_size,
        "train_bn": phase.train_bn,
        "normalization": {"name": data.preset.name,
                          "mean": list(data.preset.mean),
                          "std": list(data.preset.std)},
        "image_size": data.image_size,
    }


# ---------------------------------------------------------------------------
# evaluation

def _eval_batches(model, data: DataSpec, split, batch_size=64):
    batches = D.make_batches(
        data.manifest, split, batch_size=batch_size, image_size=data.image_size,
        preset=data.preset, augment_cfg=None, shuffle=False)
    for batch in batches:
        logits = model.forward(batch.images, training=False)
        yield batch, logits.data


def evaluate(model, data: DataSpec, split):
    """Mean cross-entropy and top-1 accuracy over a split.

    Ties in the argmax resolve to the lowest class index.
    """
    total_loss = 0.0
    correct = 0
    count = 0
    for batch, logits in _eval_batches(model, data, split):
        total_loss += float(per_item_cross_entropy(logits, batch.labels).sum())
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
        count += len(batch)
    if count == 0:
        raise DatasetError(f"split {split!r} has no items")
    return total_loss / count, correct / count


def confusion_matrix(model, data: DataSpec, split):
    """Actual-by-predicted counts over a split."""
    k = len(model.class_names)
    counts = np.zeros((k, k), dtype=np.int64)
    seen = False
    for batch, logits in _eval_batches(model, data, split):
        seen = True
        preds = logits.argmax(axis=1)
        np.add.at(counts, (batch.labels, preds), 1)
    if not seen:
        raise DatasetError(f"split {split!r} has no items")
    return ConfusionMatrix(list(model.class_names), counts)


def top_losses(model, data: DataSpec, split, k):
    """The k highest-loss items as actual/predicted/loss/probability rows."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    rows = []
    for batch, logits in _eval_batches(model, data, split):
        item_losses = per_item_cross_entropy(logits, batch.labels)
        probs = softmax_probs(logits)
        preds = logits.argmax(axis=1)
        for row in range(len(batch)):
            item = data.manifest.items[batch.indices[row]]
            rows.append(TopLossEntry(
                actual=model.class_names[batch.labels[row]],
                predicted=model.class_names[preds[row]],
                loss=float(item_losses[row]),
                probability=float(probs[row, preds[row]]),
                path=item.path,
            ))
    if not rows:
        raise DatasetError(f"split {split!r} has no items")
    rows.sort(key=lambda e: -e.loss)
    return rows[:k]


# ---------------------------------------------------------------------------
# prediction

def predict_array(model, chw, preset, image_size=None):
    """Ranked (class, probability) pairs for one channel-first image."""
    size = image_size or model.config.image_size
    arr = np.asarray(chw, dtype=np.float64)
    if arr.shape[1] != size or arr.shape[2] != size:
        arr = D.resize_bilinear(arr, size, size)
    arr = D.normalize_array(arr.astype(np.float32), preset)
    logits = model.forward(arr[None], training=False).data
    probs = softmax_probs(logits)[0]
    order = np.argsort(-probs, kind="stable")
    return [(model.class_names[i], float(probs[i])) for i in order]


def predict_bytes(model, blob, preset, image_size=None):
    """Ranked predictions for raw PPM/PNG bytes (decode errors propagate)."""
    hwc = D.decode_image_bytes(blob)
    chw = hwc.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)
    return predict_array(model, chw, preset, image_size)


def predict(model, image_path, preset, image_size=None):
    """Ranked predictions for an image file."""
    return predict_array(model, D.load_image_array(image_path), preset, image_size)
