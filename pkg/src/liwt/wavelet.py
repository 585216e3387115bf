"""Single-level 2-D Haar wavelet transform over multi-channel feature maps.

Kernels are orthonormal (each 2x2 kernel has unit L2 norm), so the forward
transform preserves energy and its inverse is its transpose. Row index is
vertical: ``LH`` is high-pass along rows, so it responds to horizontal edges.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .autodiff import Tensor, _make, concat, register_gradient, slice_

_LOW = np.array([1.0, 1.0]) / np.sqrt(2.0)
_HIGH = np.array([-1.0, 1.0]) / np.sqrt(2.0)


def haar_kernels() -> dict[str, np.ndarray]:
    """The four 2x2 analysis kernels, keyed ``ll, lh, hl, hh``."""
    return {
        "ll": np.outer(_LOW, _LOW),
        "lh": np.outer(_HIGH, _LOW),
        "hl": np.outer(_LOW, _HIGH),
        "hh": np.outer(_HIGH, _HIGH),
    }


class SubBands(NamedTuple):
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor


def _blocks(a: np.ndarray):
    H, W, C = a.shape
    b = a.reshape(H // 2, 2, W // 2, 2, C)
    return b[:, 0, :, 0], b[:, 0, :, 1], b[:, 1, :, 0], b[:, 1, :, 1]


def _analysis(a: np.ndarray) -> np.ndarray:
    """(H, W, C) -> (4, H/2, W/2, C) stacked as ll, lh, hl, hh."""
    tl, tr, bl, br = _blocks(a)
    half = a.dtype.type(0.5)
    return np.stack([
        (tl + tr + bl + br) * half,
        (-tl - tr + bl + br) * half,
        (-tl + tr - bl + br) * half,
        (tl - tr - bl + br) * half,
    ])


def _synthesis(bands: np.ndarray) -> np.ndarray:
    """Inverse (= transpose) of :func:`_analysis`."""
    ll, lh, hl, hh = bands
    half = bands.dtype.type(0.5)
    tl = (ll - lh - hl + hh) * half
    tr = (ll - lh + hl - hh) * half
    bl = (ll + lh - hl - hh) * half
    br = (ll + lh + hl + hh) * half
    h2, w2, C = ll.shape
    out = np.empty((h2, 2, w2, 2, C), dtype=bands.dtype)
    out[:, 0, :, 0] = tl
    out[:, 0, :, 1] = tr
    out[:, 1, :, 0] = bl
    out[:, 1, :, 1] = br
    return out.reshape(2 * h2, 2 * w2, C)


def dwt(x: Tensor) -> SubBands:
    """Haar analysis of an ``H x W x C`` map with even extents."""
    if x.ndim != 3:
        raise ValueError(f"dwt expects H x W x C, got {x.shape}")
    H, W, _ = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"dwt needs even extents, got {H}x{W}")
    stacked = _make(_analysis(x.data), (x,), "haar_dwt")
    return SubBands(*(slice_(stacked, i) for i in range(4)))


@register_gradient("haar_dwt")
def _dwt_grad(ctx, g):
    return (_synthesis(g),)


def idwt(b: SubBands) -> Tensor:
    """Haar synthesis; exact inverse of :func:`dwt`."""
    shape = b.ll.shape
    for band in b[1:]:
        if band.shape != shape:
            raise ValueError(f"inconsistent sub-band shapes {shape} vs {band.shape}")
    if len(shape) != 3:
        raise ValueError(f"sub-bands must be h x w x C, got {shape}")
    stacked = concat([band.reshape((1,) + shape) for band in b], axis=0)
    return _make(_synthesis(stacked.data), (stacked,), "haar_idwt")


@register_gradient("haar_idwt")
def _idwt_grad(ctx, g):
    return (_analysis(g),)


def split_freq(b: SubBands) -> tuple[Tensor, Tensor]:
    """Low band, and the three high bands concatenated on channels as (lh, hl, hh)."""
    return b.ll, concat([b.lh, b.hl, b.hh], axis=-1)


def band_energies(b: SubBands) -> dict[str, float]:
    return {name: float(np.sum(np.square(band.data, dtype=np.float64))) for name, band in zip(b._fields, b)}
