"""Image loading, LR/HR pair synthesis, query sampling and the scale curriculum."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .autodiff import Tensor
from .coords import Cell, cell_of, grid_centers
from .nn import resample

logger = logging.getLogger(__name__)


class DataError(Exception):
    pass


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path, format="PNG")


@dataclass
class ImageSet:
    images: list[np.ndarray]
    paths: list[str]

    def __len__(self) -> int:
        return len(self.images)


def load_images(directory, min_size: int = 0) -> ImageSet:
    """Decode every ``*.png`` under ``directory`` (sorted) into ``[0, 1]`` RGB arrays.

    Files that fail to decode, or are smaller than ``min_size`` on either side,
    are skipped with a warning.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"image directory not found: {root}")
    images, paths = [], []
    for path in sorted(root.glob("*.png")):
        try:
            img = read_png(path)
        except (OSError, UnidentifiedImageError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            continue
        if min(img.shape[:2]) < min_size:
            logger.warning("skipping %s: %dx%d is below the minimum %d", path, img.shape[0], img.shape[1], min_size)
            continue
        images.append(img)
        paths.append(str(path))
    if not images:
        raise DataError(f"no usable PNG images in {root}")
    return ImageSet(images, paths)


@dataclass(frozen=True)
class CurriculumSchedule:
    """Piecewise scale ranges; ``boundaries`` are fractions of the total epochs."""

    boundaries: tuple[float, ...] = (0.25, 0.5)
    ranges: tuple[tuple[float, float], ...] = ((1.0, 4.0), (1.0, 6.0), (1.0, 8.0))

    def __post_init__(self):
        if len(self.ranges) != len(self.boundaries) + 1:
            raise ValueError("need exactly one more range than boundaries")
        if list(self.boundaries) != sorted(self.boundaries) or any(not 0 < b < 1 for b in self.boundaries):
            raise ValueError(f"boundaries must be increasing fractions in (0, 1), got {self.boundaries}")
        for lo, hi in self.ranges:
            if not 1.0 <= lo <= hi:
                raise ValueError(f"invalid scale range ({lo}, {hi})")
        for (lo0, hi0), (lo1, hi1) in zip(self.ranges, self.ranges[1:]):
            if lo1 > lo0 or hi1 < hi0:
                raise ValueError("scale ranges must be nested and widening")

    @classmethod
    def fixed(cls, s: float) -> "CurriculumSchedule":
        return cls(boundaries=(), ranges=((float(s), float(s)),))

    @property
    def max_scale(self) -> float:
        return max(hi for _, hi in self.ranges)

    def stage(self, epoch: int, total: int) -> int:
        if not 0 <= epoch < total:
            raise ValueError(f"epoch {epoch} outside [0, {total})")
        frac = epoch / total
        return int(np.searchsorted(np.asarray(self.boundaries), frac, side="right"))

    def range_at(self, epoch: int, total: int) -> tuple[float, float]:
        return self.ranges[self.stage(epoch, total)]


def sample_scale(sched: CurriculumSchedule, epoch: int, total: int, rng: np.random.Generator) -> float:
    lo, hi = sched.range_at(epoch, total)
    if lo == hi:
        return lo
    return float(rng.uniform(lo, hi))


def make_pair(img: np.ndarray, s: float, p: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random ``floor(p s)`` square HR crop and its bicubic ``p x p`` LR version."""
    if p % 2:
        raise ValueError(f"patch size must be even, got {p}")
    size = int(np.floor(p * s + 1e-9))
    H, W, _ = img.shape
    if H < size or W < size:
        raise DataError(f"image {H}x{W} too small for a {size}x{size} crop")
    y = int(rng.integers(0, H - size + 1))
    x = int(rng.integers(0, W - size + 1))
    hr = np.ascontiguousarray(img[y:y + size, x:x + size])
    lr = resample(Tensor(hr), p, p, "bicubic").data
    return lr, hr


def sample_queries(hr: np.ndarray, m: int, rng: np.random.Generator, lr_shape: tuple[int, int] | None = None):
    """``m`` distinct HR pixel centers with their RGB values and the cell.

    ``lr_shape`` sets the lattice the cell is expressed against (defaults to
    the HR shape, i.e. scale 1).
    """
    H, W, _ = hr.shape
    n = H * W
    if m > n:
        raise ValueError(f"cannot draw {m} distinct pixels from {n}")
    idx = rng.permutation(n)[:m]
    coords = grid_centers(H, W)[idx]
    rgb = hr.reshape(n, -1)[idx]
    h, w = lr_shape or (H, W)
    cell = cell_of(H / h, W / w, h, w)
    return coords, rgb, cell


@dataclass
class TrainBatch:
    lr_patches: np.ndarray  # B x p x p x 3
    coords: np.ndarray  # B x m x 2
    gt_rgb: np.ndarray  # B x m x 3
    cells: np.ndarray  # B x 2, extent-scaled
    scales: np.ndarray  # B, effective scales floor(p s) / p
    raw: list[Cell] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scales)


def make_batch(
    images: ImageSet,
    indices,
    sched: CurriculumSchedule,
    epoch: int,
    total: int,
    p: int,
    rng: np.random.Generator,
    m: int | None = None,
) -> TrainBatch:
    m = p * p if m is None else m
    lrs, coords, rgbs, cells, scales, raw = [], [], [], [], [], []
    for i in indices:
        s = sample_scale(sched, epoch, total, rng)
        lr, hr = make_pair(images.images[i], s, p, rng)
        c, rgb, cell = sample_queries(hr, m, rng, lr_shape=(p, p))
        lrs.append(lr)
        coords.append(c)
        rgbs.append(rgb)
        cells.append(cell.scaled)
        scales.append(hr.shape[0] / p)
        raw.append(cell)
    return TrainBatch(np.stack(lrs), np.stack(coords), np.stack(rgbs), np.asarray(cells), np.asarray(scales), raw)
