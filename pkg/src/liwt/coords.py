"""Continuous coordinate space, local 3x3 grids, cells and positional encoding.

Coordinates are ``(y, x)`` pairs in ``[-1, 1]^2``. A lattice of extent ``n``
along an axis has pixel centers at ``-1 + (2 i + 1) / n``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CoordSpace:
    """Lattice of an ``h x w`` feature map embedded in ``[-1, 1]^2``."""

    h: int
    w: int

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError(f"lattice extents must be positive, got {self.h}x{self.w}")

    def centers(self) -> np.ndarray:
        """All pixel centers, row-major, shape ``(h * w, 2)``."""
        return grid_centers(self.h, self.w)

    def center_of(self, i, j) -> np.ndarray:
        i = np.asarray(i, dtype=np.float64)
        j = np.asarray(j, dtype=np.float64)
        return np.stack([-1.0 + (2.0 * i + 1.0) / self.h, -1.0 + (2.0 * j + 1.0) / self.w], axis=-1)


def axis_centers(n: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(n) + 1.0) / n


def grid_centers(h: int, w: int) -> np.ndarray:
    ys = axis_centers(h)
    xs = axis_centers(w)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=-1)


def to_lattice(c, n: int) -> np.ndarray:
    """Map coordinates along one axis to continuous lattice positions (center of pixel i is i)."""
    return (np.asarray(c, dtype=np.float64) + 1.0) * (n / 2.0) - 0.5


def nearest_index(c, n: int) -> np.ndarray:
    """Index of the nearest lattice center along one axis, clamped to ``[0, n)``."""
    idx = np.floor((np.asarray(c, dtype=np.float64) + 1.0) * (n / 2.0)).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def hr_query_coords(h_lr: int, w_lr: int, s_h: float, s_w: float | None = None) -> np.ndarray:
    """Pixel centers of the ``floor(s_h h) x floor(s_w w)`` output image, row-major."""
    if s_w is None:
        s_w = s_h
    if s_h < 1 or s_w < 1:
        raise ValueError(f"scales must be >= 1, got {s_h}, {s_w}")
    return grid_centers(*output_size(h_lr, w_lr, s_h, s_w))


def output_size(h: int, w: int, s_h: float, s_w: float | None = None) -> tuple[int, int]:
    if s_w is None:
        s_w = s_h
    # tolerate float noise like 2.2 * 10 = 21.999999999999996
    return int(np.floor(s_h * h + 1e-9)), int(np.floor(s_w * w + 1e-9))


@dataclass(frozen=True)
class Cell:
    """HR pixel pitch in coordinate units, plus the extent-scaled pair fed to the decoder."""

    ch: float
    cw: float
    scaled: tuple[float, float]


def cell_of(s_h: float, s_w: float, h_lr: int, w_lr: int) -> Cell:
    if min(s_h, s_w, h_lr, w_lr) <= 0:
        raise ValueError("cell_of needs positive arguments")
    ch = 2.0 / (s_h * h_lr)
    cw = 2.0 / (s_w * w_lr)
    return Cell(ch, cw, (ch * h_lr, cw * w_lr))


@dataclass(frozen=True)
class LocalGrid:
    """3x3 neighborhoods for a batch of ``M`` queries.

    indices : (M, 9, 2) clamped lattice pairs, row-major over the 3x3 window
    deltas : (M, 9, 2) query minus lattice center, scaled by the lattice extents
    center_index : (M, 2) nearest lattice pair
    """

    indices: np.ndarray
    deltas: np.ndarray
    center_index: np.ndarray

    def flat_indices(self, w: int) -> np.ndarray:
        return self.indices[..., 0] * w + self.indices[..., 1]


_OFFSETS = np.array([(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)], dtype=np.int64)


def local_grid(space: CoordSpace, x_q) -> LocalGrid:
    """Local grid around each query in ``x_q`` (shape ``(2,)`` or ``(M, 2)``)."""
    q = np.atleast_2d(np.asarray(x_q, dtype=np.float64))
    if not np.all(np.isfinite(q)):
        raise ValueError("query coordinates must be finite")
    ci = nearest_index(q[:, 0], space.h)
    cj = nearest_index(q[:, 1], space.w)
    center = np.stack([ci, cj], axis=-1)
    idx = center[:, None, :] + _OFFSETS[None, :, :]
    idx[..., 0] = np.clip(idx[..., 0], 0, space.h - 1)
    idx[..., 1] = np.clip(idx[..., 1], 0, space.w - 1)
    centers = space.center_of(idx[..., 0], idx[..., 1])
    deltas = (q[:, None, :] - centers) * np.array([space.h, space.w], dtype=np.float64)
    return LocalGrid(indices=idx, deltas=deltas, center_index=center)


def gamma(delta, L: int = 10) -> np.ndarray:
    """Sinusoidal encoding of 2-D offsets, shape ``(..., 4 L)``.

    Layout is frequency-major, component-minor, sine before cosine:
    ``[sin(d_y), cos(d_y), sin(d_x), cos(d_x), sin(2 d_y), ...]``.
    """
    d = np.asarray(delta, dtype=np.float64)
    if d.shape[-1] != 2:
        raise ValueError(f"gamma expects trailing extent 2, got {d.shape}")
    freqs = 2.0 ** np.arange(L)
    arg = d[..., None, :] * freqs[:, None]  # (..., L, 2)
    enc = np.stack([np.sin(arg), np.cos(arg)], axis=-1)  # (..., L, 2, 2)
    return enc.reshape(d.shape[:-1] + (4 * L,))
