"""K-fold splitting and early stopping."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidK


def kfold_split(n: int, k: int, seed: int = 0) -> list:
    """Seeded shuffle, then contiguous partition into ``k`` validation folds."""
    if k < 2 or n < k:
        raise InvalidK(f"need k >= 2 and n >= k, got n={n}, k={k}")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    return [(np.sort(np.concatenate(folds[:i] + folds[i + 1:])), np.sort(val)) for i, val in enumerate(folds)]


class StopDecision(enum.Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass
class TrainState:
    epoch: int = 0
    best_miou: float = float("-inf")
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    seed: int = 0
    fold_id: int = 0


def early_stop(state: TrainState, val_miou: float, patience: int = 15) -> StopDecision:
    """Record one epoch's validation mIoU; stop once ``patience`` epochs pass without a strict improvement."""
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if val_miou > state.best_miou:
        state.best_miou = val_miou
        state.best_epoch = state.epoch
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
    state.epoch += 1
    return StopDecision.STOP if state.epochs_since_improvement >= patience else StopDecision.CONTINUE
