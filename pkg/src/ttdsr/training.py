"""Epoch loop over in-memory patch pairs."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import AdamState
from .network import ModelParams, training_step

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def fit(params: ModelParams, lr: np.ndarray, hr: np.ndarray, epochs: int, batch_size: int = 64,
        learning_rate: float = 1e-3, lam: float = 0.01, seed: int = 0,
        on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Train on (N, 1, P, P) arrays; batches follow a seeded per-epoch shuffle.

    The epoch loss is the mean of the pre-update losses of its steps.
    """
    if lr.shape != hr.shape or lr.ndim != 4:
        raise ValueError(f"LR {lr.shape} and HR {hr.shape} must be matching (N, 1, P, P) arrays")
    if epochs < 1 or batch_size < 1:
        raise ValueError("epochs and batch_size must be positive")
    n = lr.shape[0]
    rng = np.random.default_rng(seed)
    state = AdamState(learning_rate=learning_rate)
    result = TrainResult()
    t0 = time.perf_counter()
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = np.sort(order[start:start + batch_size])
            losses.append(training_step(params, lr[idx], hr[idx], state, lam))
        result.step_losses.extend(losses)
        result.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.6f", epoch, epochs, result.epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, result.epoch_losses[-1])
    result.seconds = time.perf_counter() - t0
    return result
