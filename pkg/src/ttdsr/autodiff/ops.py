"""Differentiable operators over ``batch x channels x height x width`` tensors.

Only the operators the super-resolution network needs are provided.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft

from .tensor import Tensor, make_output


def _resolve_padding(padding, kh: int, kw: int) -> tuple[tuple[int, int], tuple[int, int]]:
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        # even kernels: the extra row/column of padding goes after
        return ((kh - 1) // 2, kh // 2), ((kw - 1) // 2, kw // 2)
    try:
        (t, b), (l, r) = padding
    except (TypeError, ValueError):
        raise ValueError(f"padding must be 'same', 'valid' or ((top, bottom), (left, right)), got {padding!r}")
    if min(t, b, l, r) < 0:
        raise ValueError(f"negative padding {padding!r}")
    return (int(t), int(b)), (int(l), int(r))


def _freq_major(a: np.ndarray) -> np.ndarray:
    """(A, B, Fh, Fw) -> contiguous (Fh*Fw, A, B): channel contractions
    become batched matmuls, which only hit BLAS on contiguous operands."""
    n0, n1 = a.shape[:2]
    return np.ascontiguousarray(a.reshape(n0, n1, -1).transpose(2, 0, 1))


def _from_freq_major(a: np.ndarray, fshape: tuple[int, int]) -> np.ndarray:
    return a.transpose(1, 2, 0).reshape(a.shape[1], a.shape[2], *fshape)


# One-entry cache of the last input spectrum, active only inside
# ``shared_spectrum()``: parallel branches reading the same activation with
# the same transform size then share a single forward FFT. It is keyed on
# array identity, so callers must not mutate the input while it is active.
_SPECTRUM_CACHE: list = [False, None, None, None]


def _input_spectrum(xd: np.ndarray, s: tuple[int, int]) -> np.ndarray:
    enabled, src, key, spec = _SPECTRUM_CACHE
    if enabled and src is xd and key == (xd.shape, s):
        return spec
    spec = _freq_major(sfft.rfft2(xd, s=s))
    if enabled:
        _SPECTRUM_CACHE[1:] = [xd, (xd.shape, s), spec]
    return spec


@contextlib.contextmanager
def shared_spectrum():
    """Reuse the input FFT across consecutive conv2d calls on one array."""
    _SPECTRUM_CACHE[:] = [True, None, None, None]
    try:
        yield
    finally:
        _SPECTRUM_CACHE[:] = [False, None, None, None]


def _wrap_kernel(w: np.ndarray, pt: int, pl: int, s: tuple[int, int]) -> np.ndarray:
    """Place tap (dy, dx) at circular offset (dy - pt, dx - pl) in an s-sized grid."""
    kh, kw = w.shape[2:]
    rows = (np.arange(kh) - pt) % s[0]
    cols = (np.arange(kw) - pl) % s[1]
    grid = np.zeros(w.shape[:2] + tuple(s))
    grid[:, :, rows[:, None], cols[None, :]] = w
    return grid


class _FFTCorrelator:
    """Multi-channel zero-padded 2-D cross-correlation via real FFTs.

    Output ``y[n] = sum_d w[d] x[n + d - pad_before]`` for ``n`` in the output
    range. Padding is implicit: the transform length is at least
    ``H + max(pad_before, pad_after)`` per axis, which keeps every circular
    wrap-around inside the zero region, for the forward pass and both
    gradients.
    """

    def __init__(self, xd: np.ndarray, kh: int, kw: int, pads):
        (self.pt, pb), (self.pl, pr) = pads
        self.h, self.w = xd.shape[2:]
        self.kh, self.kw = kh, kw
        self.ho = self.h + self.pt + pb - kh + 1
        self.wo = self.w + self.pl + pr - kw + 1
        self.s = (sfft.next_fast_len(self.h + max(self.pt, pb), real=True),
                  sfft.next_fast_len(self.w + max(self.pl, pr), real=True))
        self.fshape = (self.s[0], self.s[1] // 2 + 1)
        self.xf = _input_spectrum(xd, self.s)  # (F, B, C)

    def forward(self, w: np.ndarray) -> np.ndarray:
        wf = _freq_major(sfft.rfft2(_wrap_kernel(w, self.pt, self.pl, self.s)))  # (F, O, C)
        self.wf = wf
        wct = np.ascontiguousarray(wf.conj().transpose(0, 2, 1))
        yf = np.matmul(self.xf, wct)  # (F, B, O)
        y = sfft.irfft2(_from_freq_major(yf, self.fshape), s=self.s)
        return y[:, :, :self.ho, :self.wo]

    def grad_spectrum(self, g: np.ndarray) -> np.ndarray:
        return _freq_major(sfft.rfft2(g, s=self.s))  # (F, B, O)

    def grad_input(self, gf: np.ndarray) -> np.ndarray:
        dxf = np.matmul(gf, self.wf)  # (F, B, C)
        dx = sfft.irfft2(_from_freq_major(dxf, self.fshape), s=self.s)
        return dx[:, :, :self.h, :self.w]

    def grad_weight(self, gf: np.ndarray) -> np.ndarray:
        gct = np.ascontiguousarray(gf.conj().transpose(0, 2, 1))
        dwf = np.matmul(gct, self.xf)  # (F, O, C)
        dw = sfft.irfft2(_from_freq_major(dwf, self.fshape), s=self.s)
        rows = (np.arange(self.kh) - self.pt) % self.s[0]
        cols = (np.arange(self.kw) - self.pl) % self.s[1]
        return dw[:, :, rows[:, None], cols[None, :]]


# Below this many input taps (channels x kernel area) an explicit patch
# matrix is cheaper than transforming every output map.
IM2COL_MAX_TAPS = 64


class _Im2colCorrelator:
    """Correlation as one matmul against a (B*Ho*Wo, C*kh*kw) patch matrix."""

    def __init__(self, xd: np.ndarray, kh: int, kw: int, pads):
        (self.pt, pb), (self.pl, pr) = pads
        self.shape = xd.shape
        self.xp = np.pad(xd, ((0, 0), (0, 0), (self.pt, pb), (self.pl, pr)))
        win = sliding_window_view(self.xp, (kh, kw), axis=(2, 3))  # B, C, Ho, Wo, kh, kw
        b, c, self.ho, self.wo = win.shape[:4]
        self.cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * self.ho * self.wo, c * kh * kw)

    def forward(self, w: np.ndarray) -> np.ndarray:
        self.w = w
        y = self.cols @ w.reshape(w.shape[0], -1).T  # (B*Ho*Wo, O)
        return y.reshape(self.shape[0], self.ho, self.wo, -1).transpose(0, 3, 1, 2)

    def _g2d(self, g: np.ndarray) -> np.ndarray:
        return g.transpose(0, 2, 3, 1).reshape(-1, g.shape[1])

    def grad_input(self, g: np.ndarray) -> np.ndarray:
        o, c, kh, kw = self.w.shape
        b, _, h, w = self.shape
        dcols = (self._g2d(g) @ self.w.reshape(o, -1)).reshape(b, self.ho, self.wo, c, kh, kw)
        dxp = np.zeros_like(self.xp)
        for dy in range(kh):
            for dx in range(kw):
                dxp[:, :, dy:dy + self.ho, dx:dx + self.wo] += dcols[..., dy, dx].transpose(0, 3, 1, 2)
        return dxp[:, :, self.pt:self.pt + h, self.pl:self.pl + w]

    def grad_weight(self, g: np.ndarray) -> np.ndarray:
        return (self._g2d(g).T @ self.cols).reshape(self.w.shape)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding="same", trainable: bool = True, flip: bool = False) -> Tensor:
    """2-D cross-correlation of ``x`` (B, C, H, W) with ``weight`` (O, C, kh, kw).

    ``padding`` is ``"same"``, ``"valid"`` or explicit ``((top, bottom),
    (left, right))`` zero padding; ``"same"`` with an even kernel puts the
    extra row/column after. ``flip=True`` turns the correlation into a true
    convolution (kernel rotated by 180 degrees). With ``trainable=False`` the
    backward pass skips weight and bias gradients.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {xd.shape} and {wd.shape}")
    out_ch, in_ch, kh, kw = wd.shape
    if xd.shape[1] != in_ch:
        raise ValueError(f"input has {xd.shape[1]} channels, weight expects {in_ch}")
    if bias is not None and bias.shape != (out_ch,):
        raise ValueError(f"bias shape {bias.shape} != ({out_ch},)")
    if int(stride) != stride or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    pads = _resolve_padding(padding, kh, kw)
    (pt, pb), (pl, pr) = pads
    h, w = xd.shape[2:]
    if h + pt + pb < kh or w + pl + pr < kw:
        raise ValueError(f"padded input is smaller than kernel {kh}x{kw}")

    w_eff = wd[:, :, ::-1, ::-1] if flip else wd
    if kh == 1 and kw == 1:
        corr = None
        xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xd
        xflat = xp.reshape(xp.shape[0], in_ch, -1)
        w2d = np.ascontiguousarray(w_eff[:, :, 0, 0])
        y = np.matmul(w2d, xflat).reshape(xp.shape[0], out_ch, *xp.shape[2:])
    else:
        cls = _Im2colCorrelator if in_ch * kh * kw <= IM2COL_MAX_TAPS else _FFTCorrelator
        corr = cls(xd, kh, kw, pads)
        y = corr.forward(w_eff)
    full_shape = y.shape
    if stride > 1:
        y = y[:, :, ::stride, ::stride]
    y = np.ascontiguousarray(y)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        if stride > 1:
            gfull = np.zeros(full_shape)
            gfull[:, :, ::stride, ::stride] = g
            g = gfull
        want_w = trainable and weight.requires_grad
        gx = gw = gb = None
        if corr is None:
            gflat = g.reshape(g.shape[0], out_ch, -1)
            if x.requires_grad:
                dxp = np.matmul(w2d.T, gflat).reshape(xp.shape)
                gx = dxp[:, :, pt:pt + h, pl:pl + w]
            if want_w:
                gw = np.matmul(gflat, xflat.transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
        elif x.requires_grad or want_w:
            gf = corr.grad_spectrum(g) if isinstance(corr, _FFTCorrelator) else g
            if x.requires_grad:
                gx = corr.grad_input(gf)
            if want_w:
                gw = corr.grad_weight(gf)
                if flip:
                    gw = gw[:, :, ::-1, ::-1]
        if gx is not None:
            gx = np.ascontiguousarray(gx)
        if gw is not None:
            gw = np.ascontiguousarray(gw)
        if bias is not None and trainable and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_output(y, inputs, lambda g: backward(g)[:len(inputs)])


def leaky_relu(x: Tensor, alpha: float) -> Tensor:
    """Elementwise ``max(x, alpha * x)`` for ``0 <= alpha < 1``."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    pos = x.data > 0
    y = np.where(pos, x.data, alpha * x.data)
    return make_output(y, (x,), lambda g: (np.where(pos, g, alpha * g),))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = tuple(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = inputs[0].shape
    for t in inputs:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concatenate {t.shape} with {ref} along channels")
    if len(inputs) == 1:
        return inputs[0]
    y = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return tuple(g[:, a:b] for a, b in zip(bounds[:-1], bounds[1:]))

    return make_output(y, inputs, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start .. stop-1`` of ``x``."""
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ValueError(f"invalid channel slice [{start}, {stop}) of {c} channels")
    y = x.data[:, start:stop]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_output(y, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_output(a.data + b.data, (a, b), lambda g: (g, g))


def mul_const(x: Tensor, factor) -> Tensor:
    """Multiply by a constant scalar or broadcastable array (no gradient to it)."""
    factor = np.asarray(factor, dtype=np.float64)
    y = x.data * factor
    if y.shape != x.shape:
        raise ValueError(f"factor of shape {factor.shape} changes the shape of {x.shape}")
    return make_output(y, (x,), lambda g: (g * factor,))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Squared error summed per sample, averaged over the batch (first axis).

    For a batch of M images this is ``(1/M) * sum_i ||pred_i - target_i||^2``.
    """
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    m = pred.shape[0] if pred.data.ndim > 0 else 1
    diff = pred.data - target.data
    value = np.array(np.sum(diff * diff) / m)
    return make_output(value, (pred, target), lambda g: (2.0 * g * diff / m, -2.0 * g * diff / m))


def l2_penalty(weights: Sequence[Tensor], lam: float) -> Tensor:
    """``lam * sum_j w_j^2`` over every element of every tensor."""
    weights = tuple(weights)
    value = np.array(lam * sum(float(np.sum(w.data * w.data)) for w in weights))
    return make_output(value, weights, lambda g: tuple(2.0 * lam * g * w.data for w in weights))


def add_scalars(*terms: Tensor) -> Tensor:
    for t in terms:
        if t.size != 1:
            raise ValueError(f"add_scalars expects scalar tensors, got shape {t.shape}")
    value = np.array(sum(float(t.data) for t in terms))
    return make_output(value, terms, lambda g: tuple(np.reshape(g, t.shape) for t in terms))
