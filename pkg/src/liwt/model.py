"""The local implicit wavelet transformer network.

Pipeline for one LR image ``H x W x 3``::

    Z      = encoder(img)                               H x W x C
    F_L, F_H = split(dwt(Z))                            H/2 x W/2 x {C, 3C}
    F_W    = werm(F_L, F_H)                             H/2 x W/2 x C
    F_W_up = bicubic(F_W -> H x W)
    F_M    = wmpf(F_W_up, Z)
    q, k, v = conv(F_W_up), conv(Z), conv(Z)
    per query: z = wia(local grid, q, k, v, F_M)        9 x C
               rgb = decoder(z ++ cell) + bilinear(img)
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from typing import Iterator, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, bmm, broadcast_to, concat, gather_rows, relu, sigmoid, softmax
from .coords import Cell, CoordSpace, LocalGrid, cell_of, gamma, hr_query_coords, local_grid, output_size
from .nn import Conv2dParams, LinearParams, conv2d, global_avg_pool, linear, maxpool2d, resample, sample_at
from .wavelet import dwt, split_freq


class ConfigError(ValueError):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    width: int = 32
    encoder_blocks: int = 4
    werb_blocks: int = 4
    heads: int = 8
    pe_depth: int = 10
    decoder_hidden: int = 256
    se_ratio: int = 4

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
        if self.width < 1 or self.heads < 1 or self.pe_depth < 1 or self.decoder_hidden < 1:
            raise ConfigError("width, heads, pe_depth and decoder_hidden must be positive")
        if self.encoder_blocks < 0 or self.werb_blocks < 1 or self.se_ratio < 1:
            raise ConfigError("encoder_blocks >= 0, werb_blocks >= 1, se_ratio >= 1 required")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")

    @classmethod
    def large(cls) -> "ModelConfig":
        return cls(width=64, encoder_blocks=16, werb_blocks=4, heads=8, pe_depth=10)


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, (Conv2dParams, LinearParams)):
        yield f"{name}.weight", value.weight
        yield f"{name}.bias", value.bias
    elif isinstance(value, Module):
        yield from value.named_parameters(f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Encoder(Module):
    """EDSR-baseline style: head conv, residual blocks, tail conv with a global skip."""

    def __init__(self, cfg: ModelConfig, rng):
        C = cfg.width
        self.head = Conv2dParams.init(3, 3, C, rng)
        self.blocks = [
            (Conv2dParams.init(3, C, C, rng), Conv2dParams.init(3, C, C, rng)) for _ in range(cfg.encoder_blocks)
        ]
        self.tail = Conv2dParams.init(3, C, C, rng)

    def __call__(self, img: Tensor) -> Tensor:
        h = conv2d(img, self.head)
        x = h
        for c1, c2 in self.blocks:
            x = x + conv2d(relu(conv2d(x, c1)), c2)
        return conv2d(x, self.tail) + h


class Whferb(Module):
    def __init__(self, C: int, rng):
        self.wlfe = Conv2dParams.init(3, C, C, rng)
        self.whfe = Conv2dParams.init(3, C, C, rng)
        self.fuse = Conv2dParams.init(1, 2 * C, C, rng)

    def __call__(self, f: Tensor) -> Tensor:
        local = relu(conv2d(f, self.wlfe))
        high = relu(conv2d(maxpool2d(f, 3), self.whfe))
        return conv2d(concat([local, high], axis=-1), self.fuse)


class Werb(Module):
    def __init__(self, C: int, rng):
        self.whferb = Whferb(C, rng)
        self.refine1 = Conv2dParams.init(3, C, C, rng)
        self.refine2 = Conv2dParams.init(3, C, C, rng)
        self.fuse = Conv2dParams.init(3, 2 * C, C, rng)

    def __call__(self, f_l: Tensor, f_h: Tensor) -> tuple[Tensor, Tensor]:
        a = self.whferb(f_l)
        b = conv2d(relu(conv2d(f_h, self.refine1)), self.refine2)
        fused = conv2d(concat([a, b], axis=-1), self.fuse)
        return a + fused, b + fused


class Werm(Module):
    def __init__(self, cfg: ModelConfig, rng):
        C = cfg.width
        self.pre_low = Conv2dParams.init(3, C, C, rng)
        self.pre_high = Conv2dParams.init(3, 3 * C, C, rng)
        self.blocks = [Werb(C, rng) for _ in range(cfg.werb_blocks)]
        self.fuse = Conv2dParams.init(3, 2 * C, C, rng)

    def __call__(self, f_l: Tensor, f_h: Tensor) -> Tensor:
        low = conv2d(f_l, self.pre_low)
        high_skip = conv2d(f_h, self.pre_high)
        high = high_skip
        for blk in self.blocks:
            low, high = blk(low, high)
        return conv2d(concat([low, high], axis=-1), self.fuse) + high_skip


class Wmpf(Module):
    """Channel gate over concat(F_W_up, Z), skip, then 1x1 fusion."""

    def __init__(self, cfg: ModelConfig, rng):
        C2 = 2 * cfg.width
        hidden = max(1, C2 // cfg.se_ratio)
        self.squeeze = LinearParams.init(C2, hidden, rng)
        self.excite = LinearParams.init(hidden, C2, rng)
        self.out = Conv2dParams.init(1, C2, cfg.width, rng)

    def coefficients(self, u: Tensor) -> Tensor:
        return sigmoid(linear(relu(linear(global_avg_pool(u), self.squeeze)), self.excite))

    def __call__(self, f_w_up: Tensor, z: Tensor) -> Tensor:
        if f_w_up.shape != z.shape:
            raise ValueError(f"wmpf inputs differ in shape: {f_w_up.shape} vs {z.shape}")
        u = concat([f_w_up, z], axis=-1)
        a = broadcast_to(self.coefficients(u), u.shape)
        return conv2d(u * a + u, self.out)


class Wia(Module):
    def __init__(self, cfg: ModelConfig, rng):
        C = cfg.width
        self.heads = cfg.heads
        self.pe_depth = cfg.pe_depth
        self.q_proj = Conv2dParams.init(3, C, C, rng)
        self.k_proj = Conv2dParams.init(3, C, C, rng)
        self.v_proj = Conv2dParams.init(3, C, C, rng)
        self.value_fuse = LinearParams.init(2 * C, C, rng)
        self.bias = LinearParams.init(4 * cfg.pe_depth, cfg.heads, rng)

    def __call__(self, grid: LocalGrid, q_map, k_map, v_map, f_map, return_weights: bool = False):
        """Attention over the 9 grid points of each query.

        Returns ``z`` of shape ``(M, 9, C)`` (and the ``(M, heads, 9)`` weights
        when ``return_weights``). Weighted values are kept per grid point.
        """
        H, W, C = k_map.shape
        heads = self.heads
        if C % heads:
            raise ConfigError(f"channels {C} not divisible by heads {heads}")
        d = C // heads
        M = grid.indices.shape[0]
        flat = grid.flat_indices(W).reshape(-1)
        centre = grid.center_index[:, 0] * W + grid.center_index[:, 1]

        def rows(m):
            return gather_rows(m.reshape(H * W, C), flat).reshape(M, 9, C)

        q = gather_rows(q_map.reshape(H * W, C), centre)
        k, v, f = rows(k_map), rows(v_map), rows(f_map)
        v_f = linear(concat([v, f], axis=-1), self.value_fuse) + v

        scores = bmm(q.reshape(M, heads, 1, d), k.reshape(M, 9, heads, d).transpose(0, 2, 3, 1))
        scores = scores * (1.0 / math.sqrt(d))
        enc = Tensor(gamma(grid.deltas, self.pe_depth).astype(q.dtype))
        bias = linear(enc, self.bias).transpose(0, 2, 1).reshape(M, heads, 1, 9)
        w = softmax(scores + bias, axis=-1)
        w_full = broadcast_to(w.reshape(M, heads, 9, 1), (M, heads, 9, d))
        vh = v_f.reshape(M, 9, heads, d).transpose(0, 2, 1, 3)
        z = (w_full * vh).transpose(0, 2, 1, 3).reshape(M, 9, C)
        if return_weights:
            return z, w.reshape(M, heads, 9)
        return z


class Decoder(Module):
    """Five-layer MLP with ReLU between layers and a linear RGB output."""

    def __init__(self, cfg: ModelConfig, rng):
        dims = [9 * cfg.width + 2] + [cfg.decoder_hidden] * 4 + [3]
        self.layers = [LinearParams.init(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        last = self.layers[-1]
        last.weight.data *= last.weight.dtype.type(0.1)

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = linear(x, layer)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class FeatureMaps(NamedTuple):
    z: Tensor
    f_w: Tensor
    f_w_up: Tensor
    f_wmpf: Tensor
    q: Tensor
    k: Tensor
    v: Tensor
    img: Tensor


class LiwtModel(Module):
    """Encoder, WERM, WMPF, WIA and decoder with shared configuration."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=None):
        self.config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        with ad.default_dtype(dtype or ad.get_default_dtype()):
            self.encoder = Encoder(self.config, rng)
            self.werm = Werm(self.config, rng)
            self.wmpf = Wmpf(self.config, rng)
            self.wia = Wia(self.config, rng)
            self.decoder = Decoder(self.config, rng)

    def named_parameters(self, prefix: str = ""):
        for key in ("encoder", "werm", "wmpf", "wia", "decoder"):
            yield from getattr(self, key).named_parameters(f"{prefix}{key}.")

    @property
    def dtype(self):
        return self.encoder.head.weight.dtype

    def encode(self, img: Tensor) -> Tensor:
        return self.encoder(img)

    def features(self, img: Tensor) -> FeatureMaps:
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"expected an H x W x 3 image, got {img.shape}")
        H, W, _ = img.shape
        if H % 2 or W % 2:
            raise ValueError(f"LR extents must be even (pad or crop upstream), got {H}x{W}")
        z = self.encoder(img)
        f_l, f_h = split_freq(dwt(z))
        f_w = self.werm(f_l, f_h)
        f_w_up = resample(f_w, H, W, "bicubic")
        f_wmpf = self.wmpf(f_w_up, z)
        q = conv2d(f_w_up, self.wia.q_proj)
        k = conv2d(z, self.wia.k_proj)
        v = conv2d(z, self.wia.v_proj)
        return FeatureMaps(z, f_w, f_w_up, f_wmpf, q, k, v, img)

    def query(self, feats: FeatureMaps, coords, cell_scaled, return_weights: bool = False):
        """RGB predictions at ``coords`` (``M x 2``); ``cell_scaled`` is the extent-scaled cell."""
        coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
        H, W, C = feats.z.shape
        grid = local_grid(CoordSpace(H, W), coords)
        out = self.wia(grid, feats.q, feats.k, feats.v, feats.f_wmpf, return_weights=return_weights)
        z, weights = out if return_weights else (out, None)
        M = len(coords)
        cell = np.broadcast_to(np.asarray(cell_scaled, dtype=self.dtype).reshape(-1, 2), (M, 2))
        dec_in = concat([z.reshape(M, 9 * C), Tensor(np.ascontiguousarray(cell, dtype=self.dtype))], axis=-1)
        rgb = self.decoder(dec_in) + sample_at(feats.img, coords, "bilinear")
        return (rgb, weights) if return_weights else rgb

    def forward(self, img: Tensor, coords, cell_scaled) -> Tensor:
        return self.query(self.features(img), coords, cell_scaled)

    __call__ = forward

    def super_resolve(self, img: np.ndarray, s_h: float, s_w: float | None = None, chunk: int = 4096) -> np.ndarray:
        """Full ``floor(s_h H) x floor(s_w W) x 3`` image, unclamped, without graph recording."""
        s_w = s_h if s_w is None else s_w
        H, W, _ = img.shape
        oh, ow = output_size(H, W, s_h, s_w)
        coords = hr_query_coords(H, W, s_h, s_w)
        cell = cell_of(oh / H, ow / W, H, W).scaled
        return self.render(img, coords, cell, chunk).reshape(oh, ow, 3)

    def render(self, img: np.ndarray, coords: np.ndarray, cell_scaled, chunk: int = 4096) -> np.ndarray:
        with ad.no_grad():
            feats = self.features(Tensor(np.asarray(img, dtype=self.dtype)))
            parts = [self.query(feats, coords[i:i + chunk], cell_scaled).data for i in range(0, len(coords), chunk)]
        return np.concatenate(parts, axis=0)


def query_cell(hr_h: int, hr_w: int, lr_h: int, lr_w: int) -> Cell:
    """Cell for an HR grid of ``hr_h x hr_w`` over an ``lr_h x lr_w`` input."""
    return cell_of(hr_h / lr_h, hr_w / lr_w, lr_h, lr_w)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LIWTCKPT"


def save_checkpoint(model: LiwtModel, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None):
    """Write manifest header + tensor snapshots. ``extra`` holds e.g. optimizer moments."""
    tensors = [(name, t.data) for name, t in model.named_parameters()]
    tensors += sorted((extra or {}).items())
    manifest = {
        "format": 1,
        "config": asdict(model.config),
        "dtype": str(model.dtype),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "meta": meta or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    for _, arr in tensors:
        ad.save_tensor(buf, arr)
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def read_manifest(fh) -> dict:
    if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError("not a LIWT checkpoint (bad magic)")
    raw = fh.read(8)
    if len(raw) != 8:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", raw)
    body = fh.read(n)
    if len(body) != n:
        raise CheckpointError("truncated checkpoint manifest")
    try:
        return json.loads(body)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc


def load_checkpoint(path, config: ModelConfig | None = None):
    """Return ``(model, extra, meta)``.

    With ``config`` given, every tensor is validated against the model that
    config builds; otherwise the config stored in the file is used.
    """
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        manifest = read_manifest(fh)
        try:
            file_cfg = ModelConfig(**manifest["config"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise CheckpointError(f"checkpoint config invalid: {exc}") from exc
        cfg = config or file_cfg
        model = LiwtModel(cfg, dtype=np.dtype(manifest.get("dtype", "float32")))
        params = dict(model.named_parameters())
        extra: dict[str, np.ndarray] = {}
        for entry in manifest["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            try:
                arr = ad.load_tensor(fh)
            except ad.SnapshotError as exc:
                raise CheckpointError(f"tensor {name}: {exc}") from exc
            if arr.shape != shape:
                raise CheckpointError(f"tensor {name}: payload shape {arr.shape} != manifest {shape}")
            if name in params:
                if params[name].shape != shape:
                    raise CheckpointError(
                        f"tensor {name}: shape {shape} does not match configured {params[name].shape}"
                    )
                params[name].data = arr.astype(params[name].dtype, copy=True)
                del params[name]
            elif name.startswith("model.") or name.split(".")[0] in ("encoder", "werm", "wmpf", "wia", "decoder"):
                raise CheckpointError(f"tensor {name}: not part of the configured model")
            else:
                extra[name] = arr.copy()
        if params:
            raise CheckpointError(f"checkpoint is missing tensor {next(iter(params))}")
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor")
    return model, extra, manifest.get("meta", {})
