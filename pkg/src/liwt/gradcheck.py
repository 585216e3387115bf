"""Finite-difference gradient checks for individual ops and for the whole model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .coords import cell_of, hr_query_coords
from .model import LiwtModel, ModelConfig
from .wavelet import SubBands, dwt, idwt

GROUPS = {
    "encoder": ("encoder.",),
    "werm": ("werm.",),
    "wmpf": ("wmpf.",),
    "wia": ("wia.q_proj", "wia.k_proj", "wia.v_proj", "wia.value_fuse"),
    "wia.bias_head": ("wia.bias.",),
    "decoder": ("decoder.",),
}


def rel_error(a, n, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-3, entries=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (perturbed in place, then restored)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def check_function(fn: Callable[..., Tensor], inputs: list[np.ndarray], h: float = 1e-3, seed: int = 0) -> float:
    """Max relative error between analytic and numeric gradients of ``sum(fn(*inputs) * R)``."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(x.astype(np.float64), requires_grad=True) for x in inputs]
    out = fn(*tensors)
    weight = rng.standard_normal(out.shape)

    def loss_value():
        with ad.no_grad():
            return float(np.sum(fn(*tensors).data * weight))

    loss = ad.sum_(ad.mul(out, Tensor(weight)))
    ad.backward(loss)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(loss_value, t.data, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(ana, num))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One small random case per registered differentiable op."""
    r = rng.standard_normal
    conv3 = nn.Conv2dParams(Tensor(r((3, 3, 2, 3)), requires_grad=True), Tensor(r(3), requires_grad=True))
    pts = rng.uniform(-1.2, 1.2, size=(7, 2))
    return {
        "add": (ad.add, [r((3, 4)), r((3, 4))]),
        "sub": (ad.sub, [r((3, 4)), r((3, 4))]),
        "mul": (ad.mul, [r((3, 4)), r((3, 4))]),
        "scale": (lambda a: ad.scale(a, -2.5), [r((5,))]),
        "shift": (lambda a: ad.shift(a, 0.7), [r((5,))]),
        "relu": (ad.relu, [_away_from_zero(rng, (4, 5))]),
        "sigmoid": (ad.sigmoid, [r((4, 5)) * 3]),
        "abs": (ad.abs_, [_away_from_zero(rng, (4, 5))]),
        "sum": (lambda a: ad.sum_(a, axis=1), [r((3, 4, 2))]),
        "matmul": (ad.matmul, [r((5, 7)), r((7, 3))]),
        "bmm": (ad.bmm, [r((2, 3, 4, 5)), r((2, 3, 5, 2))]),
        "softmax": (lambda a: ad.softmax(a, axis=-1), [r((4, 9)) * 2]),
        "reshape": (lambda a: ad.reshape(a, (6, 4)), [r((2, 3, 4))]),
        "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [r((2, 3, 4))]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [r((3, 2)), r((3, 4))]),
        "slice": (lambda a: ad.slice_(a, (slice(1, 3), 2)), [r((4, 5))]),
        "gather_rows": (lambda a: ad.gather_rows(a, np.array([0, 2, 2, 3, 0])), [r((4, 3))]),
        "broadcast_to": (lambda a: ad.broadcast_to(a, (3, 4)), [r((4,))]),
        "conv2d": (lambda x: nn.conv2d(x, conv3), [r((5, 6, 2))]),
        "maxpool2d": (nn.maxpool2d, [rng.permutation(60).reshape(5, 4, 3) / 10.0]),
        "resample": (lambda x: nn.resample(x, 7, 5, "bicubic"), [r((4, 3, 2))]),
        "interp_rows": (lambda x: nn.sample_at(x, pts, "bilinear"), [r((4, 5, 2))]),
        "haar_dwt": (lambda x: ad.concat(list(dwt(x)), axis=-1), [r((4, 6, 2))]),
        "haar_idwt": (lambda a, b, c, d: idwt(SubBands(a, b, c, d)), [r((2, 3, 2)) for _ in range(4)]),
    }


def check_ops(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: check_function(fn, inputs, seed=seed) for name, (fn, inputs) in op_cases(rng).items()}


@dataclass
class GroupResult:
    group: str
    max_rel_error: float
    tensors: int
    worst_tensor: str
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < MODEL_TOLERANCE


MODEL_TOLERANCE = 1e-4


def tiny_config() -> ModelConfig:
    return ModelConfig(width=8, encoder_blocks=1, werb_blocks=1, heads=2, pe_depth=4)


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def kink_safe_difference(f, perturb, h: float, retries: int = 3):
    """Central difference of ``f`` along ``perturb``, shrinking ``h`` while a kink is crossed.

    ``f`` returns ``(value, pattern)``; ``perturb(eps)`` shifts the parameter
    by ``eps`` (``perturb(0)`` restores it). Returns ``None`` if every step
    size still flips a branch.
    """
    _, base = f()
    for _ in range(retries + 1):
        perturb(h)
        fp, pp = f()
        perturb(-h)
        fm, pm = f()
        perturb(0.0)
        if _same_pattern(pp, base) and _same_pattern(pm, base):
            return (fp - fm) / (2 * h)
        h /= 10.0
    return None


def check_model(cfg: ModelConfig | None = None, seed: int = 0, lr_size: int = 8, queries: int = 12,
                entries: int = 6, h: float = 1e-5) -> list[GroupResult]:
    """Gradient of the L1 loss vs central differences for every parameter tensor.

    Per tensor: ``entries`` random coordinates plus the largest-gradient one,
    and one random-direction derivative covering the whole tensor.
    """
    cfg = cfg or tiny_config()
    rng = np.random.default_rng(seed)
    model = LiwtModel(cfg, seed=seed, dtype=np.float64)
    # lift the decoder output layer so the residual path carries real signal
    model.decoder.layers[-1].weight.data *= 10.0
    img = Tensor(rng.random((lr_size, lr_size, 3)))
    s = 2.3
    coords = hr_query_coords(lr_size, lr_size, s)
    coords = coords[rng.choice(len(coords), size=queries, replace=False)]
    cell = cell_of(s, s, lr_size, lr_size).scaled
    gt = Tensor(rng.random((queries, 3)))

    def loss_tensor():
        return ad.l1(model(img, coords, cell), gt, reduction="mean")

    def evaluate():
        with ad.no_grad(), ad.kink_trace() as trace:
            value = loss_tensor().item()
        return value, trace

    model.zero_grad()
    ad.backward(loss_tensor())
    per_tensor: dict[str, float] = {}
    skipped: dict[str, int] = {}
    for name, p in model.named_parameters():
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        orig = p.data.copy()
        pick = list(rng.choice(p.size, size=min(entries, p.size), replace=False))
        pick.append(int(np.argmax(np.abs(ana))))
        direction = rng.standard_normal(p.shape)
        direction /= np.linalg.norm(direction)
        probes = []
        for i in pick:
            unit = np.zeros(p.size)
            unit[i] = 1.0
            probes.append((unit.reshape(p.shape), float(ana.reshape(-1)[i])))
        probes.append((direction, float(np.sum(ana * direction))))
        err, miss = 0.0, 0
        for vec, analytic in probes:

            def perturb(eps, vec=vec):
                p.data = orig + eps * vec

            numeric = kink_safe_difference(evaluate, perturb, h)
            if numeric is None:
                miss += 1
                continue
            err = max(err, rel_error(analytic, numeric))
        p.data = orig
        per_tensor[name] = err
        skipped[name] = miss

    results = []
    for group, prefixes in GROUPS.items():
        names = [n for n in per_tensor if n.startswith(prefixes)]
        worst = max(names, key=per_tensor.get)
        results.append(GroupResult(group, per_tensor[worst], len(names), worst, sum(skipped[n] for n in names)))
    return results
