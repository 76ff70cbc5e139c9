"""Magnitude pruning with a scheduled sparsity ramp, and sign binarization of weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model_zoo import ConfigError, Model


@dataclass(frozen=True)
class PruneSchedule:
    """Polynomial ramp from ``initial_sparsity`` to ``final_sparsity`` over ``ramp_epochs``.

    ``power=3`` is the usual cubic decay; ``power=1`` gives a linear ramp.
    """

    initial_sparsity: float = 0.50
    final_sparsity: float = 0.80
    ramp_epochs: int = 50
    power: int = 3

    def __post_init__(self):
        if not 0.0 <= self.initial_sparsity <= self.final_sparsity < 1.0:
            raise ConfigError("need 0 <= initial_sparsity <= final_sparsity < 1")
        if self.ramp_epochs < 0 or self.power < 1:
            raise ConfigError("ramp_epochs must be >= 0 and power >= 1")


def sparsity_at(schedule: PruneSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if schedule.ramp_epochs == 0 or epoch >= schedule.ramp_epochs:
        return schedule.final_sparsity
    remaining = 1.0 - epoch / schedule.ramp_epochs
    span = schedule.initial_sparsity - schedule.final_sparsity
    return schedule.final_sparsity + span * remaining**schedule.power


def prune_count(target: float, n: int) -> int:
    """``floor(target * n)``, immune to products like 0.7 * 300 = 209.99999999999997."""
    return math.floor(round(target * n, 9))


def magnitude_mask(weights: np.ndarray, target: float, prior_mask: np.ndarray | None = None) -> np.ndarray:
    """Mask zeroing the ``floor(target * n)`` smallest-magnitude entries.

    Ties go to the lowest flat index. Entries already masked by ``prior_mask``
    rank first and stay masked even if the target is lower than before.
    """
    if not 0.0 <= target < 1.0:
        raise ValueError("target sparsity must lie in [0, 1)")
    flat = np.abs(weights).reshape(-1)
    prior = np.ones(flat.size) if prior_mask is None else prior_mask.reshape(-1)
    k = prune_count(target, flat.size)
    # lexsort: last key is primary -> (masked first, then |w|, then index)
    order = np.lexsort((np.arange(flat.size), flat, prior != 0))
    mask = prior.astype(np.float64).copy()
    mask[order[:k]] = 0.0
    return mask.reshape(weights.shape)


def apply_magnitude_mask(model: Model, target: float) -> dict[str, np.ndarray]:
    """Update every prunable tensor's mask to ``target`` sparsity and zero the masked weights."""
    if model.mode != "pruned":
        raise ConfigError(f"magnitude masking needs a pruned-mode model, got {model.mode!r}")
    for name in model.weight_names():
        prior = model.masks.get(name)
        model.masks[name] = magnitude_mask(model.params[name], target, prior)
    model.apply_masks()
    return model.masks


def tensor_sparsity(model: Model) -> dict[str, float]:
    return {n: 1.0 - np.count_nonzero(model.params[n]) / model.params[n].size for n in model.weight_names()}


def to_pruned(model: Model) -> Model:
    """Copy a dense model into pruned mode with all-ones masks."""
    if model.mode != "dense":
        raise ConfigError(f"can only prune a dense model, got {model.mode!r}")
    pruned = model.copy()
    pruned.mode = "pruned"
    pruned.masks = {n: np.ones_like(pruned.params[n]) for n in pruned.weight_names()}
    return pruned


def binarize_forward_weights(latent: np.ndarray) -> np.ndarray:
    """Sign with sign(0) = +1."""
    return np.where(np.asarray(latent) >= 0, 1.0, -1.0)


def binarize_backward(upstream: np.ndarray, latent: np.ndarray) -> np.ndarray:
    """Straight-through estimator: pass the gradient where |latent| <= 1, zero elsewhere."""
    if upstream.shape != latent.shape:
        raise ValueError(f"gradient shape {upstream.shape} does not match latent {latent.shape}")
    return upstream * (np.abs(latent) <= 1.0)


def clip_latents(model: Model) -> None:
    for latent in model.latents.values():
        np.clip(latent, -1.0, 1.0, out=latent)
