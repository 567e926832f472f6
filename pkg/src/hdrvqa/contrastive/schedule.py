"""Learning-rate schedule: linear warm-up from zero, then cosine decay without restarts."""
from __future__ import annotations

import math


def lr_at(step: int, base_lr: float, warmup_epochs: int, epochs: int, steps_per_epoch: int) -> float:
    """Learning rate for optimiser step ``step`` (0-based).

    Steps past the end of training return 0.
    """
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    warmup = warmup_epochs * steps_per_epoch
    total = epochs * steps_per_epoch
    if step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr if step < total else 0.0
    progress = min((step - warmup) / (total - warmup), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def config_lr_at(step: int, config, steps_per_epoch: int) -> float:
    """:func:`lr_at` reading its constants from a ``TrainConfig``."""
    return lr_at(step, config.base_lr, config.warmup_epochs, config.epochs, steps_per_epoch)
