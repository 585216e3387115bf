"""PSNR / SSIM on RGB images in [0, 1], plus interpolation baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor
from .coords import hr_query_coords, output_size
from .nn import resample, sample_at

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def border_for(scale: float) -> int:
    return int(math.ceil(scale))


def _prepare(a, b, crop: int):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if crop:
        if 2 * crop >= a.shape[0] or 2 * crop >= a.shape[1]:
            raise ValueError(f"border crop {crop} leaves nothing of a {a.shape[0]}x{a.shape[1]} image")
        a = a[crop:-crop, crop:-crop]
        b = b[crop:-crop, crop:-crop]
    return a, b


def psnr(a, b, crop: int = 0) -> float:
    """``10 log10(1 / MSE)`` in dB; identical images give ``inf``."""
    a, b = _prepare(a, b, crop)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, (k, k)), win)


def ssim(a, b, crop: int = 0) -> float:
    """Single-scale SSIM, Gaussian 11x11 window (sigma 1.5), valid filtering, channel mean."""
    a, b = _prepare(a, b, crop)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def bicubic_baseline(img_lr: np.ndarray, s_h: float, s_w: float | None = None) -> np.ndarray:
    H, W, _ = img_lr.shape
    oh, ow = output_size(H, W, s_h, s_w)
    return resample(Tensor(np.asarray(img_lr)), oh, ow, "bicubic").data


def bilinear_baseline(img_lr: np.ndarray, s_h: float, s_w: float | None = None) -> np.ndarray:
    """Bilinear upsampling through the same point sampler the model adds its residual to."""
    H, W, _ = img_lr.shape
    oh, ow = output_size(H, W, s_h, s_w)
    coords = hr_query_coords(H, W, s_h, s_w)
    return sample_at(Tensor(np.asarray(img_lr)), coords, "bilinear").data.reshape(oh, ow, -1)


@dataclass
class EvalReport:
    """Per-image and mean scores for each (method, scale)."""

    crop_rule: str = "ceil(scale)"
    rows: list[dict] = field(default_factory=list)

    def add(self, method: str, scale: float, image: str, psnr_db: float, ssim_val: float, crop: int):
        self.rows.append(
            {"method": method, "scale": scale, "image": image, "psnr": psnr_db, "ssim": ssim_val, "crop": crop}
        )

    def summary(self) -> list[dict]:
        out = []
        keys = []
        for r in self.rows:
            key = (r["scale"], r["method"])
            if key not in keys:
                keys.append(key)
        for scale, method in keys:
            sel = [r for r in self.rows if r["scale"] == scale and r["method"] == method]
            out.append({
                "scale": scale,
                "method": method,
                "images": len(sel),
                "psnr": float(np.mean([r["psnr"] for r in sel])),
                "ssim": float(np.mean([r["ssim"] for r in sel])),
            })
        return out

    def to_table(self) -> str:
        lines = [f"{'scale':>7}  {'method':<10} {'images':>6} {'PSNR(dB)':>10} {'SSIM':>8}"]
        for r in self.summary():
            lines.append(f"{r['scale']:>7g}  {r['method']:<10} {r['images']:>6d} {r['psnr']:>10.4f} {r['ssim']:>8.5f}")
        lines.append(f"border crop: {self.crop_rule} pixels, RGB, values clamped to [0, 1]")
        return "\n".join(lines) + "\n"

    def to_rows(self, sep: str = ",") -> str:
        head = sep.join(["scale", "method", "image", "psnr", "ssim", "crop"])
        body = [
            sep.join([f"{r['scale']:g}", r["method"], r["image"], repr(r["psnr"]), repr(r["ssim"]), str(r["crop"])])
            for r in self.rows
        ]
        return "\n".join([head] + body) + "\n"
