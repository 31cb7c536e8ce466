"""Discrete orthonormal Tchebichef polynomials, moment transforms and kernels.

The polynomial matrix ``P`` has one row per polynomial order and one column
per sample position, so that for a square block ``G`` the moments are
``P @ G @ P.T`` and the block is recovered with ``P.T @ M @ P``.
"""

from __future__ import annotations

import decimal
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KERNEL_SIZE = 8
N_KERNELS = KERNEL_SIZE * KERNEL_SIZE
# Same-padding split for the even 8x8 kernel: 3 before, 4 after.
SAME_PAD = ((KERNEL_SIZE - 1) // 2, KERNEL_SIZE // 2)


def tchebichef_polynomials(n_points: int) -> np.ndarray:
    """Evaluate the orthonormal Tchebichef polynomials of orders 0..N-1.

    Uses the three-term recurrence in the order ``n`` with the closed-form
    orders 0 and 1 as initial conditions. Returns an ``(N, N)`` array whose
    row ``n`` holds ``t_n(0), ..., t_n(N-1)``.

    The recurrence amplifies rounding error roughly geometrically in ``n``
    (float64 loses orthonormality from about N = 32), so it is run in
    decimal arithmetic with ``N + 40`` significant digits and rounded once.
    """
    if int(n_points) != n_points or n_points < 2:
        raise ValueError(f"n_points must be an integer >= 2, got {n_points!r}")
    n_pts = int(n_points)
    with decimal.localcontext() as ctx:
        ctx.prec = n_pts + 40
        D = decimal.Decimal
        N = D(n_pts)
        span = [2 * D(x) + 1 - N for x in range(n_pts)]
        rows = [[1 / N.sqrt()] * n_pts]
        c1 = (3 / (N * (N * N - 1))).sqrt()
        rows.append([s * c1 for s in span])
        for n in range(2, n_pts):
            dn = D(n)
            a1 = ((4 * dn * dn - 1) / (N * N - dn * dn)).sqrt() / dn
            a2 = ((1 - dn) / dn) * ((2 * dn + 1) / (2 * dn - 3)).sqrt() \
                * ((N * N - (dn - 1) ** 2) / (N * N - dn * dn)).sqrt()
            prev, prev2 = rows[-1], rows[-2]
            rows.append([a1 * s * p1 + a2 * p2 for s, p1, p2 in zip(span, prev, prev2)])
        return np.array([[float(v) for v in row] for row in rows], dtype=np.float64)


def zigzag_order(grid_size: int) -> list[tuple[int, int]]:
    """JPEG zig-zag scan of a ``grid_size`` x ``grid_size`` grid.

    Even anti-diagonals run bottom-left to top-right, odd ones the other way,
    giving ``(0,0), (0,1), (1,0), (2,0), (1,1), (0,2), ...``.
    """
    if int(grid_size) != grid_size or grid_size < 1:
        raise ValueError(f"grid_size must be a positive integer, got {grid_size!r}")
    n = int(grid_size)
    order = []
    for s in range(2 * n - 1):
        lo, hi = max(0, s - n + 1), min(s, n - 1)
        rows = range(hi, lo - 1, -1) if s % 2 == 0 else range(lo, hi + 1)
        order.extend((r, s - r) for r in rows)
    return order


@dataclass(frozen=True)
class TchebichefBasis:
    """Polynomial matrix for ``n_points`` samples plus, for N=8, the 64
    zig-zag ordered 8x8 kernels ``outer(t_p, t_q)``."""

    n_points: int
    poly_matrix: np.ndarray = field(repr=False)
    kernels: np.ndarray | None = field(default=None, repr=False)
    order: tuple[tuple[int, int], ...] = field(default=(), repr=False)

    def kernel_stack(self) -> np.ndarray:
        if self.kernels is None:
            raise ValueError("kernels are only defined for an 8-point basis")
        return self.kernels

    def to_text(self) -> str:
        """Polynomial matrix, one row per line, 17 significant digits."""
        return "".join(
            " ".join(f"{v:.17g}" for v in row) + "\n" for row in self.poly_matrix
        )

    def save_text(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def make_basis(n_points: int) -> TchebichefBasis:
    P = tchebichef_polynomials(n_points)
    P.setflags(write=False)
    kernels = None
    order: tuple[tuple[int, int], ...] = ()
    if n_points == KERNEL_SIZE:
        order = tuple(zigzag_order(KERNEL_SIZE))
        kernels = np.stack([np.outer(P[p], P[q]) for p, q in order])
        kernels.setflags(write=False)
    return TchebichefBasis(int(n_points), P, kernels, order)


def load_basis_text(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2)


def _square(block, n: int, what: str) -> np.ndarray:
    arr = np.asarray(block, dtype=np.float64)
    if arr.shape != (n, n):
        raise ValueError(f"{what} must be {n}x{n}, got shape {arr.shape}")
    return arr


def forward_moments(image, basis: TchebichefBasis) -> np.ndarray:
    """Moment matrix ``P G P^T`` of a square ``N x N`` block."""
    G = _square(image, basis.n_points, "image")
    P = basis.poly_matrix
    return P @ G @ P.T


def inverse_moments(moments, basis: TchebichefBasis) -> np.ndarray:
    """Reconstruct the block ``P^T M P`` from its moment matrix."""
    M = _square(moments, basis.n_points, "moments")
    P = basis.poly_matrix
    return P.T @ M @ P


def tcl_transform(image, basis: TchebichefBasis) -> np.ndarray:
    """Correlate ``image`` with all 64 kernels, stride 1, zero same-padding.

    Returns a ``(64, H, W)`` cube in zig-zag channel order. Channel ``i`` at
    ``(y, x)`` equals moment ``order[i]`` of the window whose top-left corner
    is ``(y - 3, x - 3)``.
    """
    kernels = basis.kernel_stack()
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {img.shape}")
    if min(img.shape) < KERNEL_SIZE:
        raise ValueError(f"image {img.shape} is smaller than the {KERNEL_SIZE}x{KERNEL_SIZE} kernel")
    padded = np.pad(img, (SAME_PAD, SAME_PAD))
    windows = sliding_window_view(padded, (KERNEL_SIZE, KERNEL_SIZE))
    return np.einsum("yxuv,kuv->kyx", windows, kernels, optimize=True)


def coefficient_loss_profile(hr, lr, basis: TchebichefBasis, interior_only: bool = False) -> np.ndarray:
    """Per-channel mean ``|coefficient|`` of ``hr`` minus that of ``lr``.

    With ``interior_only`` the means skip positions whose window touches the
    zero padding.
    """
    hr = np.asarray(hr, dtype=np.float64)
    lr = np.asarray(lr, dtype=np.float64)
    if hr.shape != lr.shape:
        raise ValueError(f"hr {hr.shape} and lr {lr.shape} differ in shape")
    c_hr = np.abs(tcl_transform(hr, basis))
    c_lr = np.abs(tcl_transform(lr, basis))
    if interior_only:
        (a, b) = SAME_PAD
        if hr.shape[0] <= a + b or hr.shape[1] <= a + b:
            raise ValueError("image has no interior alignments")
        c_hr = c_hr[:, a:-b, a:-b]
        c_lr = c_lr[:, a:-b, a:-b]
    return c_hr.mean(axis=(1, 2)) - c_lr.mean(axis=(1, 2))


def kernel_tile_grid(kernels: np.ndarray, cols: int = 8, tile_scale: int = 4, gap: int = 1) -> np.ndarray:
    """Lay kernels out as a uint8 tile image, each tile normalized on its own.

    Constant tiles render mid-gray.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    n, kh, kw = kernels.shape
    rows = -(-n // cols)
    th, tw = kh * tile_scale, kw * tile_scale
    out = np.full((rows * (th + gap) + gap, cols * (tw + gap) + gap), 255, dtype=np.uint8)
    for i, k in enumerate(kernels):
        lo, hi = k.min(), k.max()
        span = hi - lo
        # relative threshold: recurrence round-off leaves ~1e-16 ripple on the DC kernel
        if span <= 1e-12 * max(1.0, abs(hi)):
            tile = np.full(k.shape, 128.0)
        else:
            tile = (k - lo) / span * 255.0
        tile = np.kron(np.rint(tile), np.ones((tile_scale, tile_scale)))
        r, c = divmod(i, cols)
        y0, x0 = gap + r * (th + gap), gap + c * (tw + gap)
        out[y0:y0 + th, x0:x0 + tw] = tile.astype(np.uint8)
    return out
