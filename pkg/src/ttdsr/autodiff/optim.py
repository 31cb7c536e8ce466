"""Adam optimizer and Glorot-uniform initialization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class OptimizerStateError(RuntimeError):
    """Raised when an update is requested for a parameter with no gradient."""


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list, repr=False)
    second_moment: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One in-place Adam update with bias correction.

    ``epsilon`` is added to the bias-corrected root second moment. Gradients
    are left in place; callers clear them before the next backward pass.
    """
    params = list(params)
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise OptimizerStateError(f"no gradient for parameters: {', '.join(missing)}")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    elif len(state.first_moment) != len(params):
        raise OptimizerStateError(
            f"state tracks {len(state.first_moment)} parameters, got {len(params)}")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


def glorot_limit(shape: Sequence[int]) -> float:
    """Bound of the Glorot-uniform distribution.

    For conv weights (out, in, kh, kw) the fans are ``in*kh*kw`` and
    ``out*kh*kw``; for 2-D shapes (out, in) they are ``in`` and ``out``.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        fan_in = fan_out = shape[0] if shape else 1
    else:
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_uniform_init(shape: Sequence[int], seed: int | np.random.Generator,
                        name: str | None = None) -> Tensor:
    """Trainable tensor drawn from U(-limit, limit); deterministic for a seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    limit = glorot_limit(shape)
    return Tensor(rng.uniform(-limit, limit, size=tuple(shape)), requires_grad=True, name=name)
