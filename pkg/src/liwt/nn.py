"""Layer primitives: convolution, pooling, affine maps, resampling, point sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, _make, broadcast_to, gather_rows, get_default_dtype, matmul, mean, record_kink, register_gradient
from .coords import nearest_index, to_lattice


def kaiming_bound(fan_in: int, negative_slope: float = np.sqrt(5.0)) -> float:
    """Uniform bound ``gain * sqrt(3 / fan_in)`` with the leaky-relu gain for ``negative_slope``."""
    gain = np.sqrt(2.0 / (1.0 + negative_slope**2))
    return float(gain * np.sqrt(3.0 / fan_in))


@dataclass
class Conv2dParams:
    weight: Tensor  # k x k x Cin x Cout
    bias: Tensor  # Cout

    def __post_init__(self):
        k1, k2, cin, cout = self.weight.shape
        if k1 != k2:
            raise ValueError(f"square kernels only, got {k1}x{k2}")
        if self.bias.shape != (cout,):
            raise ValueError(f"bias shape {self.bias.shape} does not match Cout={cout}")

    @property
    def kernel(self) -> int:
        return self.weight.shape[0]

    @property
    def cin(self) -> int:
        return self.weight.shape[2]

    @property
    def cout(self) -> int:
        return self.weight.shape[3]

    @classmethod
    def init(cls, k: int, cin: int, cout: int, rng: np.random.Generator, dtype=None):
        """Kaiming-uniform (fan-in) weights, zero bias."""
        dtype = dtype or get_default_dtype()
        bound = kaiming_bound(k * k * cin)
        w = rng.uniform(-bound, bound, size=(k, k, cin, cout))
        return cls(Tensor(w.astype(dtype), requires_grad=True), Tensor(np.zeros(cout, dtype), requires_grad=True))


@dataclass
class LinearParams:
    weight: Tensor  # din x dout
    bias: Tensor  # dout

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"inconsistent linear shapes {self.weight.shape}, {self.bias.shape}")

    @property
    def din(self) -> int:
        return self.weight.shape[0]

    @property
    def dout(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, din: int, dout: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or get_default_dtype()
        bound = kaiming_bound(din)
        w = rng.uniform(-bound, bound, size=(din, dout))
        return cls(Tensor(w.astype(dtype), requires_grad=True), Tensor(np.zeros(dout, dtype), requires_grad=True))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, p: Conv2dParams, stride: int = 1, padding: str = "zero") -> Tensor:
    """Cross-correlation of an ``H x W x Cin`` map with a ``k x k x Cin x Cout`` kernel.

    ``padding="zero"`` pads by ``k // 2`` so stride-1 odd kernels keep ``H x W``;
    ``padding="none"`` is a valid correlation.
    """
    if x.ndim != 3:
        raise ValueError(f"conv2d expects H x W x C input, got {x.shape}")
    k, cin = p.kernel, p.cin
    if x.shape[2] != cin:
        raise ValueError(f"conv2d: input has {x.shape[2]} channels, kernel expects {cin}")
    if padding == "zero":
        pad = k // 2
    elif padding == "none":
        pad = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    H, W, _ = x.shape
    if stride == 2 and k == 2 and (H % 2 or W % 2):
        raise ValueError(f"stride-2 2x2 convolution needs even extents, got {H}x{W}")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ValueError(f"input {H}x{W} smaller than kernel {k}")
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    # (H', W', Cin, k, k) -> (H', W', k, k, Cin)
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, k * k * cin)
    wmat = p.weight.data.reshape(k * k * cin, p.cout)
    out = (cols @ wmat + p.bias.data).reshape(ho, wo, p.cout)
    return _make(
        out, (x, p.weight, p.bias), "conv2d",
        cols=cols, wmat=wmat, pad=pad, stride=stride, k=k, xshape=x.shape, wshape=p.weight.shape,
    )


@register_gradient("conv2d")
def _conv2d_grad(ctx, g):
    k, pad, stride = ctx["k"], ctx["pad"], ctx["stride"]
    H, W, cin = ctx["xshape"]
    ho, wo, cout = g.shape
    g2 = g.reshape(ho * wo, cout)
    dw = (ctx["cols"].T @ g2).reshape(ctx["wshape"])
    db = g2.sum(axis=0)
    dcols = (g2 @ ctx["wmat"].T).reshape(ho, wo, k, k, cin)
    dxp = np.zeros((H + 2 * pad, W + 2 * pad, cin), dtype=g.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += dcols[:, :, di, dj, :]
    dx = dxp[pad:pad + H, pad:pad + W, :] if pad else dxp
    return dx, dw, db


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def maxpool2d(x: Tensor, kernel: int = 3) -> Tensor:
    """Stride-1 max pooling with replicate padding; output keeps the input shape.

    The gradient goes to the first maximal element of each window (row-major).
    """
    if kernel % 2 == 0:
        raise ValueError("maxpool2d needs an odd kernel to preserve size")
    H, W, C = x.shape
    r = kernel // 2
    xp = np.pad(x.data, ((r, r), (r, r), (0, 0)), mode="edge")
    win = sliding_window_view(xp, (kernel, kernel), axis=(0, 1))  # H, W, C, k, k
    flat = win.reshape(H, W, C, kernel * kernel)
    arg = np.argmax(flat, axis=-1)
    record_kink(arg)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    # source pixel of each argmax, undoing the replicate padding
    ii = np.clip(np.arange(H)[:, None, None] + arg // kernel - r, 0, H - 1)
    jj = np.clip(np.arange(W)[None, :, None] + arg % kernel - r, 0, W - 1)
    src = (ii * W + jj) * C + np.arange(C)[None, None, :]
    return _make(np.ascontiguousarray(out), (x,), "maxpool2d", src=src, shape=x.shape)


@register_gradient("maxpool2d")
def _maxpool_grad(ctx, g):
    out = np.zeros(int(np.prod(ctx["shape"])), dtype=g.dtype)
    np.add.at(out, ctx["src"].ravel(), g.ravel())
    return (out.reshape(ctx["shape"]),)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean of an ``H x W x C`` map."""
    if x.ndim != 3:
        raise ValueError(f"global_avg_pool expects H x W x C, got {x.shape}")
    return mean(x, axis=(0, 1))


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """Affine map on the trailing axis."""
    if x.shape[-1] != p.din:
        raise ValueError(f"linear: trailing extent {x.shape[-1]} != {p.din}")
    lead = x.shape[:-1]
    x2 = x.reshape(-1, p.din) if x.ndim != 2 else x
    y = matmul(x2, p.weight)
    y = y + broadcast_to(p.bias, y.shape)
    return y.reshape(lead + (p.dout,)) if x.ndim != 2 else y


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------

CUBIC_A = -0.5


def cubic_kernel(t, a: float = CUBIC_A) -> np.ndarray:
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def interp_taps(pos, n: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    """Source indices and weights for continuous lattice positions ``pos``.

    Returns arrays of shape ``(len(pos), T)``; out-of-range taps are clamped.
    """
    pos = np.asarray(pos, dtype=np.float64)
    if mode == "nearest":
        idx = np.clip(np.floor(pos + 0.5).astype(np.int64), 0, n - 1)[:, None]
        return idx, np.ones_like(idx, dtype=np.float64)
    base = np.floor(pos)
    t = pos - base
    base = base.astype(np.int64)
    if mode == "bilinear":
        offs = np.array([0, 1])
        w = np.stack([1.0 - t, t], axis=-1)
    elif mode == "bicubic":
        offs = np.array([-1, 0, 1, 2])
        w = cubic_kernel(t[:, None] - offs[None, :])
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    idx = np.clip(base[:, None] + offs[None, :], 0, n - 1)
    return idx, w


def interp_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """``n_out x n_in`` matrix resampling one axis with the align-centers convention."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    idx, w = interp_taps(pos, n_in, mode)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), idx.shape[1]), idx.ravel()), w.ravel())
    return m


def resample(x: Tensor, out_h: int, out_w: int, mode: str = "bicubic") -> Tensor:
    """Separable resize of an ``H x W x C`` map (no antialiasing)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    H, W, C = x.shape
    my = interp_matrix(H, out_h, mode).astype(x.dtype)
    mx = interp_matrix(W, out_w, mode).astype(x.dtype)
    out = _apply_separable(x.data, my, mx)
    return _make(out, (x,), "resample", my=my, mx=mx)


def _apply_separable(a: np.ndarray, my: np.ndarray, mx: np.ndarray) -> np.ndarray:
    H, W, C = a.shape
    t = (my @ a.reshape(H, W * C)).reshape(my.shape[0], W, C)
    t = np.matmul(mx[None], t)  # (oh, ow, C)
    return np.ascontiguousarray(t)


@register_gradient("resample")
def _resample_grad(ctx, g):
    return (_apply_separable(g, ctx["my"].T, ctx["mx"].T),)


def sample_at(x: Tensor, points, mode: str = "nearest") -> Tensor:
    """Read ``x`` (``H x W x C``) at continuous coordinates ``points`` (``M x 2``).

    ``nearest`` takes the nearest lattice pixel (indices clamped);
    ``bilinear`` blends the four surrounding pixels with clamped taps.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    H, W, C = x.shape
    flat = x.reshape(H * W, C)
    if mode == "nearest":
        idx = nearest_index(pts[:, 0], H) * W + nearest_index(pts[:, 1], W)
        return gather_rows(flat, idx)
    if mode != "bilinear":
        raise ValueError(f"sample_at supports nearest and bilinear, got {mode!r}")
    iy, wy = interp_taps(to_lattice(pts[:, 0], H), H, "bilinear")
    ix, wx = interp_taps(to_lattice(pts[:, 1], W), W, "bilinear")
    idx = (iy[:, :, None] * W + ix[:, None, :]).reshape(len(pts), -1)
    w = (wy[:, :, None] * wx[:, None, :]).reshape(len(pts), -1)
    return interp_rows(flat, idx, w)


def interp_rows(flat: Tensor, idx: np.ndarray, w: np.ndarray) -> Tensor:
    """``out[m] = sum_t w[m, t] * flat[idx[m, t]]`` with fixed weights."""
    w = w.astype(flat.dtype)
    # fixed tap order keeps each row independent of how queries are chunked
    out = w[:, 0, None] * flat.data[idx[:, 0]]
    for t in range(1, idx.shape[1]):
        out += w[:, t, None] * flat.data[idx[:, t]]
    return _make(out, (flat,), "interp_rows", idx=idx, w=w, n=flat.shape[0])


@register_gradient("interp_rows")
def _interp_rows_grad(ctx, g):
    idx, w = ctx["idx"], ctx["w"]
    out = np.zeros((ctx["n"], g.shape[1]), dtype=g.dtype)
    contrib = w[:, :, None] * g[:, None, :]
    np.add.at(out, idx.ravel(), contrib.reshape(-1, g.shape[1]))
    return (out,)
