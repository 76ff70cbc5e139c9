"""Mini-batch ADAM training for dense, pruned and binarized models, patient-specific
derivation, and evaluation."""

from __future__ import annotations

import csv
import io
import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass, field

import numpy as np

from . import sparsify
from . import tensor_nn as nn
from .datapipe import DatasetSplit, WindowSet
from .metrics import Metrics
from .model_zoo import (
    ConfigError,
    Model,
    build_model,
    count_params,
    layer_plan,
    patient_profile,
    predict_labels,
    predict_proba,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    # None keeps the dropout probabilities stored in the architecture (0.25 by default)
    dropout_p: float | None = None
    seed: int = 0
    mode: str = "dense"
    schedule: sparsify.PruneSchedule | None = None
    bn_momentum: float = 0.99

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("need learning_rate > 0, epochs >= 1 and batch_size >= 2")
        if self.mode not in ("dense", "pruned", "binarized"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.dropout_p is not None and not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ConfigError("bn_momentum must lie in [0, 1)")
        if self.mode == "pruned":
            if self.schedule is None:
                self.schedule = sparsify.PruneSchedule()
            if self.epochs <= self.schedule.ramp_epochs:
                raise ConfigError(
                    f"pruned training needs epochs > ramp_epochs ({self.schedule.ramp_epochs}) "
                    "so at least one epoch runs at the final sparsity"
                )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    sparsity: list[float] = field(default_factory=list)
    nonzero_params: list[int] = field(default_factory=list)
    best_epoch: int = -1
    notes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.val_acc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for i in range(len(self)):
            writer.writerow([i, repr(self.train_loss[i]), repr(self.train_acc[i]), repr(self.val_loss[i]),
                             repr(self.val_acc[i])])
        return buf.getvalue()


def _prepare_model(model: Model, config: TrainConfig) -> Model:
    if config.mode == model.mode:
        return model.copy()
    if model.mode == "dense" and config.mode == "pruned":
        return sparsify.to_pruned(model)
    if model.mode == "dense" and config.mode == "binarized":
        if model.config.use_bias:
            raise ConfigError("binarized training needs a model built with use_bias=False")
        binarized = model.copy()
        binarized.mode = "binarized"
        binarized.latents = {n: np.clip(binarized.params[n], -1.0, 1.0) for n in binarized.weight_names()}
        binarized.sync_binary()
        return binarized
    raise ConfigError(f"cannot train a {model.mode} model in {config.mode} mode")


def _with_dropout(model: Model, p: float | None) -> None:
    if p is None:
        return
    for spec in model.plan:
        if spec.kind == "dropout":
            spec.attrs["p"] = p


def evaluate_loss(model: Model, ws: WindowSet) -> tuple[float, float]:
    """Infer-mode mean cross-entropy and accuracy (fraction) over a window set."""
    probs = predict_proba(model, ws.x)
    p_true = np.clip(probs[np.arange(len(ws)), ws.y], 1e-300, None)
    loss = float(-np.log(p_true).mean())
    acc = float((predict_labels(probs) == ws.y).mean())
    return loss, acc


def train(model: Model, split: DatasetSplit, config: TrainConfig,
          on_epoch_end: Callable[[int, Model], None] | None = None) -> tuple[Model, TrainHistory]:
    """Train a copy of ``model``; return the weights of the best-validation epoch and the history.

    Pruned mode fine-tunes under the sparsity schedule (masks recomputed at
    each epoch start and re-applied after every step); only epochs at the
    final sparsity compete for best weights. Binarized mode runs forward with
    sign weights and updates clipped latents through the straight-through
    estimator. ``on_epoch_end(epoch, model)`` sees the working model after
    each epoch's validation pass and must not modify it.
    """
    if len(split.train) == 0 or len(split.validation) == 0:
        raise ConfigError("training and validation partitions must be nonempty")
    work = _prepare_model(model, config)
    work.plan = [type(s)(s.kind, s.name, s.in_shape, s.out_shape, dict(s.attrs)) for s in work.plan]
    _with_dropout(work, config.dropout_p)
    rng = np.random.default_rng(config.seed)
    opt = nn.AdamState(learning_rate=config.learning_rate)
    history = TrainHistory()
    best: Model | None = None
    x_train, y_train = split.train.x, split.train.y
    n = len(split.train)

    for epoch in range(config.epochs):
        if work.mode == "pruned":
            target = sparsify.sparsity_at(config.schedule, epoch)
            sparsify.apply_magnitude_mask(work, target)
        order = rng.permutation(n)
        losses, correct, seen = 0.0, 0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if idx.size < 2:  # batch norm needs two samples
                continue
            logits = work.forward_batch(x_train[idx], "train", rng, config.bn_momentum)
            loss, probs, grad = nn.softmax_cross_entropy(logits, y_train[idx])
            grads = work.backward(grad)
            _step(work, grads, opt)
            losses += loss * idx.size
            correct += int((predict_labels(probs) == y_train[idx]).sum())
            seen += idx.size
        val_loss, val_acc = evaluate_loss(work, split.validation)
        history.train_loss.append(losses / max(seen, 1))
        history.train_acc.append(correct / max(seen, 1))
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        history.nonzero_params.append(_nonzero(work))
        if work.mode == "pruned":
            history.sparsity.append(target)
            eligible = target == config.schedule.final_sparsity
        else:
            eligible = True
        if eligible and (best is None or val_acc > history.val_acc[history.best_epoch]):
            history.best_epoch = epoch
            best = work.copy()
        if on_epoch_end is not None:
            on_epoch_end(epoch, work)
        log.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f", epoch, history.train_loss[-1],
                 history.train_acc[-1], val_loss, val_acc)

    best.plan = layer_plan(best.config)  # drop any training-only dropout override
    best.metadata["best_epoch"] = history.best_epoch
    best.metadata["best_val_acc"] = history.val_acc[history.best_epoch]
    return best, history


def _nonzero(model: Model) -> int:
    return count_params(model)[1]


def _step(model: Model, grads: dict[str, np.ndarray], opt: nn.AdamState) -> None:
    if model.mode == "binarized":
        targets = {}
        for name, g in grads.items():
            if name in model.latents:
                targets[name] = model.latents[name]
                grads[name] = sparsify.binarize_backward(g, model.latents[name])
            else:
                targets[name] = model.params[name]
        nn.adam_step(targets, grads, opt)
        sparsify.clip_latents(model)
        model.sync_binary()
        return
    if model.mode == "pruned":
        for name, mask in model.masks.items():
            grads[name] = grads[name] * mask
    nn.adam_step(model.params, grads, opt)
    if model.mode == "pruned":
        model.apply_masks()


# ---------------------------------------------------------------------------
# Patient-specific models
# ---------------------------------------------------------------------------


def patient_model_from(generic: Model, rng: np.random.Generator) -> Model:
    """Patient-profile model carrying the generic model's input BN and all but its last conv block.

    The batch norm ahead of the dense head and the dense head itself are freshly
    initialized since the flatten length changes.
    """
    if generic.mode != "dense":
        raise ConfigError(f"patient models derive from a dense generic model, got {generic.mode!r}")
    derived = build_model(patient_profile(generic.config), rng)
    kept = [f"conv{i}" for i in range(len(derived.config.conv_blocks))] + ["input_bn"]
    for group_name in ("params", "buffers"):
        src, dst = getattr(generic, group_name), getattr(derived, group_name)
        for name in dst:
            if name.split(".")[0] in kept:
                dst[name] = src[name].copy()
    derived.metadata["derived_from"] = generic.config.name
    return derived


def derive_patient_model(generic: Model, patient_split: DatasetSplit, config: TrainConfig) -> tuple[Model, TrainHistory]:
    if config.mode != "dense":
        raise ConfigError("patient-specific retraining runs in dense mode")
    derived = patient_model_from(generic, np.random.default_rng([config.seed, 4]))
    no_apnea = not (patient_split.train.y == 1).any()
    model, history = train(derived, patient_split, config)
    if no_apnea or not (patient_split.test.y == 1).any():
        history.notes.append("patient split holds no apnea windows; sensitivity is undefined")
        model.metadata["flag"] = "no_apnea_windows"
    return model, history


def evaluate(model: Model, windows) -> Metrics:
    """Infer-mode confusion counts over a :class:`WindowSet` or a list of sample windows."""
    ws = windows if isinstance(windows, WindowSet) else WindowSet.from_windows(list(windows))
    if len(ws) == 0:
        raise ValueError("cannot evaluate an empty window set")
    return Metrics.from_labels(ws.y, predict_labels(predict_proba(model, ws.x)))
