"""TTDSR network: fixed Tchebichef transform layer, split frequency cube,
low/high frequency paths, trainable inverse transform and a fine-tuning tail.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tcheb
from .data import bicubic_resize
from .autodiff import (AdamState, Tape, Tensor, adam_step, add, add_scalars, checkpoint,
                       concat_channels, conv2d, glorot_uniform_init, l2_penalty, leaky_relu,
                       mse_loss, mul_const, shared_spectrum, slice_channels)

log = logging.getLogger(__name__)

N_CHANNELS = tcheb.N_KERNELS
# The inverse layer is the transpose of the forward correlation, so its
# same-padding is mirrored: 4 before, 3 after.
ITCL_PAD = (tcheb.SAME_PAD[::-1], tcheb.SAME_PAD[::-1])


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite; the run should be aborted."""


class ModelStateError(RuntimeError):
    pass


@dataclass
class NetConfig:
    split_point: int = 5
    leaky_alpha: float = 0.1
    low_kernel: int = 5
    low_hidden: int | None = None  # None: keep split_point + 1 channels
    high_kernels: tuple[int, ...] = (3, 5, 7)
    branch_width: int = 16
    finetune_widths: tuple[int, ...] = (32, 32)
    finetune_kernel: int = 3
    local_residual: bool = True
    global_residual: bool = True
    # Harness switches: pass the cube straight to the inverse layer and/or
    # skip the fine-tuning tail.
    bypass_paths: bool = False
    bypass_finetune: bool = False
    seed: int = 0

    def __post_init__(self):
        self.high_kernels = tuple(int(k) for k in self.high_kernels)
        self.finetune_widths = tuple(int(w) for w in self.finetune_widths)
        if not 1 <= self.split_point <= 62:
            raise ValueError(f"split_point must lie in [1, 62], got {self.split_point}")
        if not 0.0 <= self.leaky_alpha < 1.0:
            raise ValueError(f"leaky_alpha must lie in [0, 1), got {self.leaky_alpha}")
        for k in (self.low_kernel, self.finetune_kernel, *self.high_kernels):
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd and positive, got {k}")
        if not self.high_kernels:
            raise ValueError("at least one high-frequency branch is required")
        if self.branch_width < 1 or (self.low_hidden is not None and self.low_hidden < 1):
            raise ValueError("channel widths must be positive")
        if any(w < 1 for w in self.finetune_widths):
            raise ValueError("finetune widths must be positive")

    @property
    def n_low(self) -> int:
        """Channels 0..T (DC included) form the low-frequency slice."""
        return self.split_point + 1

    @property
    def n_high(self) -> int:
        return N_CHANNELS - self.n_low

    def to_dict(self) -> dict:
        d = asdict(self)
        d["high_kernels"] = list(self.high_kernels)
        d["finetune_widths"] = list(self.finetune_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@lru_cache(maxsize=1)
def tcl_weight() -> Tensor:
    """The fixed forward-transform kernels as a read-only (64, 1, 8, 8) tensor."""
    k = np.array(tcheb.make_basis(tcheb.KERNEL_SIZE).kernel_stack())[:, None]
    k.setflags(write=False)
    return Tensor(k, requires_grad=False, name="tcl")


@lru_cache(maxsize=16)
def _overlap_count(h: int, w: int) -> np.ndarray:
    """Number of transform windows covering each pixel (64 in the interior)."""
    before, after = tcheb.SAME_PAD

    def axis(n):
        x = np.arange(n)
        return np.minimum(x + before, n - 1) - np.maximum(x - after, 0) + 1

    counts = np.outer(axis(h), axis(w)).astype(np.float64)
    counts.setflags(write=False)
    return counts


class ModelParams:
    """Trainable tensors of a TTDSR model keyed by name, plus its config.

    The forward-transform kernels are not stored here; they are the fixed
    :func:`tcl_weight`.
    """

    def __init__(self, config: NetConfig, tensors: dict[str, Tensor], steps: int = 0):
        self.config = config
        self.tensors = tensors
        self.steps = steps

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    @property
    def itcl_kernels(self) -> np.ndarray:
        return self.tensors["itcl.kernels"].data[0]

    def active_names(self) -> list[str]:
        cfg = self.config
        names = []
        for n in self.tensors:
            if cfg.bypass_paths and n.startswith(("low.", "high.")):
                continue
            if cfg.bypass_finetune and n.startswith("finetune."):
                continue
            names.append(n)
        return names

    def trainable(self) -> list[Tensor]:
        """Tensors that take part in the forward pass and receive updates."""
        return [self.tensors[n] for n in self.active_names()]

    def penalized(self) -> list[Tensor]:
        """Conv weights under L2 regularization: no biases, no inverse-transform kernels."""
        return [self.tensors[n] for n in self.active_names()
                if n.endswith(".weight")]

    def n_trainable(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def is_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def save(self, path: str | Path) -> None:
        meta = {"kind": "ttdsr-model", "config": self.config.to_dict(), "steps": self.steps}
        checkpoint.save(path, self.arrays(), meta)

    def to_bytes(self) -> bytes:
        meta = {"kind": "ttdsr-model", "config": self.config.to_dict(), "steps": self.steps}
        return checkpoint.dumps(self.arrays(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        arrays, meta = checkpoint.load(path)
        if meta.get("kind") != "ttdsr-model":
            raise checkpoint.CheckpointError(f"{path} does not hold a TTDSR model")
        config = NetConfig.from_dict(meta["config"])
        fresh = build_model(config)
        if set(arrays) != set(fresh.tensors):
            raise checkpoint.CheckpointError("checkpoint tensors do not match the model layout")
        for name, t in fresh.tensors.items():
            if arrays[name].shape != t.shape:
                raise checkpoint.CheckpointError(
                    f"{name}: shape {arrays[name].shape} != expected {t.shape}")
            t.data = np.array(arrays[name])
        fresh.steps = int(meta.get("steps", 0))
        return fresh


def build_model(config: NetConfig | None = None, basis: tcheb.TchebichefBasis | None = None) -> ModelParams:
    """Allocate and initialize all trainable tensors.

    Conv weights are Glorot-uniform from one generator seeded with
    ``config.seed`` (fixed draw order), biases start at zero, and the inverse
    kernels start as exact copies of the basis kernels.
    """
    config = config or NetConfig()
    basis = basis or tcheb.make_basis(tcheb.KERNEL_SIZE)
    if basis.n_points != tcheb.KERNEL_SIZE:
        raise ValueError(f"the network needs an 8-point basis, got N={basis.n_points}")
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, Tensor] = {}

    def conv(name, out_ch, in_ch, k):
        tensors[f"{name}.weight"] = glorot_uniform_init((out_ch, in_ch, k, k), rng, name=f"{name}.weight")
        tensors[f"{name}.bias"] = Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.bias")

    n_low, n_high = config.n_low, config.n_high
    hidden = config.low_hidden or n_low
    conv("low.conv1", hidden, n_low, config.low_kernel)
    conv("low.conv2", n_low, hidden, 1)
    for k in config.high_kernels:
        conv(f"high.branch{k}", config.branch_width, n_high, k)
    conv("high.fuse", n_high, config.branch_width * len(config.high_kernels), 1)
    tensors["itcl.kernels"] = Tensor(np.array(basis.kernel_stack())[None].copy(),
                                     requires_grad=True, name="itcl.kernels")
    widths = (1, *config.finetune_widths, 1)
    for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        conv(f"finetune.conv{i}", cout, cin, config.finetune_kernel)

    # channel bookkeeping: both paths must hand back exactly what they took
    assert tensors["low.conv1.weight"].shape[1] == n_low
    assert tensors["low.conv2.weight"].shape[0] == n_low
    assert tensors["high.fuse.weight"].shape[0] == n_high
    assert n_low + n_high == N_CHANNELS

    params = ModelParams(config, tensors)
    log.debug("built TTDSR model with %d trainable parameters", params.n_trainable())
    return params


def _as_batch(x) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[:, None]
        t = Tensor(arr)
    if t.data.ndim != 4 or t.shape[1] != 1:
        raise ValueError(f"expected a batch x 1 x H x W input, got shape {t.shape}")
    if min(t.shape[2:]) < tcheb.KERNEL_SIZE:
        raise ValueError(f"spatial size {t.shape[2:]} is below the {tcheb.KERNEL_SIZE}x{tcheb.KERNEL_SIZE} kernel")
    return t


def tcl_layer(x) -> Tensor:
    """Image batch (B, 1, H, W) -> frequency cube (B, 64, H, W), zig-zag order."""
    return conv2d(_as_batch(x), tcl_weight(), padding="same", trainable=False)


def itcl_layer(params: ModelParams, cube: Tensor) -> Tensor:
    """Frequency cube -> image through the trainable inverse kernels.

    Each channel is convolved (kernel flipped, i.e. the transpose of the
    forward correlation) and the sum is divided by the per-pixel window
    overlap count, so with the initial kernels this inverts :func:`tcl_layer`
    exactly, borders included.
    """
    y = conv2d(cube, params["itcl.kernels"], padding=ITCL_PAD, flip=True)
    return mul_const(y, 1.0 / _overlap_count(*cube.shape[2:]))


def _conv_act(params, name, x, alpha, act=True):
    y = conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], padding="same")
    return leaky_relu(y, alpha) if act else y


def forward(params: ModelParams, lr_image) -> Tensor:
    """Run the network on a (B, 1, H, W) batch of bicubic-upscaled Y planes."""
    cfg = params.config
    x = _as_batch(lr_image)
    a = cfg.leaky_alpha
    cube = tcl_layer(x)
    if cfg.bypass_paths:
        z = cube
    else:
        f_low = slice_channels(cube, 0, cfg.n_low)
        f_high = slice_channels(cube, cfg.n_low, N_CHANNELS)

        z_low = _conv_act(params, "low.conv1", f_low, a)
        z_low = _conv_act(params, "low.conv2", z_low, a)

        with shared_spectrum():
            branches = [_conv_act(params, f"high.branch{k}", f_high, a) for k in cfg.high_kernels]
        z_high = _conv_act(params, "high.fuse", concat_channels(branches), a, act=False)
        if cfg.local_residual:
            z_high = add(z_high, f_high)
        z = concat_channels([z_low, z_high])

    y = itcl_layer(params, z)
    if not cfg.bypass_finetune:
        n_ft = len(cfg.finetune_widths) + 1
        for i in range(1, n_ft + 1):
            y = _conv_act(params, f"finetune.conv{i}", y, a, act=i < n_ft)
    if cfg.global_residual:
        y = add(y, x)
    return y


def training_loss(params: ModelParams, batch_lr, batch_hr, lam: float) -> tuple[Tensor, Tensor]:
    """Return (total, data term) where total = data + lam * sum of squared conv weights."""
    lr = _as_batch(batch_lr)
    hr = _as_batch(batch_hr)
    if lr.shape != hr.shape:
        raise ValueError(f"LR batch {lr.shape} and HR batch {hr.shape} differ")
    data = mse_loss(forward(params, lr), hr)
    return add_scalars(data, l2_penalty(params.penalized(), lam)), data


def training_step(params: ModelParams, batch_lr, batch_hr, state: AdamState, lam: float = 0.01) -> float:
    """One Adam step on a batch; returns the loss before the update."""
    params.zero_grad()
    with Tape() as tape:
        loss, _ = training_loss(params, batch_lr, batch_hr, lam)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {params.steps}")
    tape.backward(loss)
    adam_step(params.trainable(), state)
    params.zero_grad()
    params.steps += 1
    return value


def predict(params: ModelParams, lr_batch) -> np.ndarray:
    """Forward pass without recording a tape; returns a plain array."""
    return forward(params, lr_batch).data


def itcl_kernel_strip(params: ModelParams, tile_scale: int = 4) -> np.ndarray:
    """Learned inverse kernels as a one-row strip of 64 tiles (uint8)."""
    return tcheb.kernel_tile_grid(params.itcl_kernels, cols=N_CHANNELS, tile_scale=tile_scale)


def super_resolve(params: ModelParams, lr_image, scale: int,
                  value_range: tuple[float, float] = (0.0, 1.0),
                  allow_untrained: bool = False) -> np.ndarray:
    """Bicubic-upscale a small Y plane by ``scale`` and refine it with the network.

    Grayscale images are handled the same way, as their own Y plane. The
    result is clamped to ``value_range``.
    """
    if scale not in (2, 3, 4):
        raise ValueError(f"scale must be 2, 3 or 4, got {scale}")
    if not params.is_finite():
        raise ModelStateError("model parameters contain NaN or Inf")
    if params.steps == 0 and not allow_untrained:
        raise ModelStateError("model has not been trained (0 optimizer steps)")
    small = np.asarray(lr_image, dtype=np.float64)
    h, w = small.shape
    up = np.clip(bicubic_resize(small, h * scale, w * scale), *value_range)
    out = predict(params, up)[0, 0]
    return np.clip(out, *value_range)
