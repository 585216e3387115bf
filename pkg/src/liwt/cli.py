"""``liwt`` command line: train, sr, eval, dwt-inspect, grad-check.

Exit codes: 0 ok, 1 internal error, 2 usage/config error, 3 checkpoint error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import Config, load_config
from .coords import cell_of, grid_centers, output_size
from .data import DataError, load_images, read_png, write_png
from .gradcheck import MODEL_TOLERANCE, check_model, check_ops, tiny_config
from .metrics import EvalReport, bicubic_baseline, bilinear_baseline, border_for, psnr, ssim
from .model import CheckpointError, ConfigError, LiwtModel, load_checkpoint
from .nn import resample
from .training import TrainingError, fit
from .validation import check_scale
from .wavelet import dwt

logger = logging.getLogger("liwt")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_CHECKPOINT = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _threads(n: int | None):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(config_path=None, epochs=None, seed=None, threads=None, out=None, data=None, resume=None) -> Path:
    cfg = load_config(config_path) if config_path else Config()
    cfg = cfg.with_overrides(epochs=epochs, seed=seed, threads=threads, run_dir=out, train_dir=data)
    if not cfg.train_dir:
        raise UsageError("no training image directory (set [paths] train_dir or pass --data)")
    if not Path(cfg.train_dir).is_dir():
        raise UsageError(f"training image directory not found: {cfg.train_dir}")
    need = int(np.floor(cfg.train.patch * cfg.curriculum.max_scale + 1e-9))
    images = load_images(cfg.train_dir, min_size=need)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfg.dumps())
    model = LiwtModel(cfg.model, seed=cfg.train.seed)
    with _threads(cfg.threads):
        fit(model, images, cfg.curriculum, cfg.train, run_dir, config_record=cfg.to_record(), resume=resume)
    return run_dir


def _load_model(checkpoint) -> LiwtModel:
    model, _, _ = load_checkpoint(checkpoint)
    return model


def super_resolve_any(model: LiwtModel, img: np.ndarray, s_h: float, s_w: float) -> np.ndarray:
    """Super-resolve an image of any size; odd extents are reflect-padded and cropped back."""
    H, W, _ = img.shape
    oh, ow = output_size(H, W, s_h, s_w)
    ph, pw = H % 2, W % 2
    if ph or pw:
        logger.info("reflect-padding %dx%d input by (%d, %d) for the wavelet transform", H, W, ph, pw)
        img = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(H, W) > 1 else "edge")
    Hp, Wp = img.shape[:2]
    coords = grid_centers(oh, ow)
    # original domain occupies the top-left H x W of the padded lattice
    coords = np.stack([-1.0 + (coords[:, 0] + 1.0) * H / Hp, -1.0 + (coords[:, 1] + 1.0) * W / Wp], axis=-1)
    cell = cell_of(oh / H, ow / W, H, W).scaled
    return model.render(img, coords, cell).reshape(oh, ow, 3)


def cmd_sr(checkpoint, image, scale, out, threads=None) -> Path:
    s_h, s_w = check_scale(scale)
    model = _load_model(checkpoint)
    try:
        img = read_png(image)
    except OSError as exc:
        raise UsageError(f"cannot read image {image}: {exc}") from exc
    with _threads(threads):
        hr = super_resolve_any(model, img, s_h, s_w)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, hr)
    logger.info("wrote %s (%dx%d)", out, hr.shape[0], hr.shape[1])
    return out


def eval_pair(hr: np.ndarray, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Crop ``hr`` and synthesize an even-sized bicubic LR so that ``floor(s h)`` matches the crop."""
    h = int(np.floor(hr.shape[0] / s)) // 2 * 2
    w = int(np.floor(hr.shape[1] / s)) // 2 * 2
    if h < 2 or w < 2:
        raise ValueError(f"image {hr.shape[:2]} too small for scale {s}")
    oh, ow = output_size(h, w, s, s)
    crop = np.ascontiguousarray(hr[:oh, :ow])
    lr = resample(Tensor(crop), h, w, "bicubic").data
    return lr, crop


def cmd_eval(checkpoint, hr_dir, scales, out, threads=None) -> EvalReport:
    model = _load_model(checkpoint)
    if not Path(hr_dir).is_dir():
        raise UsageError(f"HR image directory not found: {hr_dir}")
    images = load_images(hr_dir)
    report = EvalReport()
    with _threads(threads):
        for s in scales:
            crop_px = border_for(s)
            for path, hr in zip(images.paths, images.images):
                lr, target = eval_pair(hr, s)
                # one dtype for every method so baselines and model share exact arithmetic
                lr = lr.astype(model.dtype)
                preds = {
                    "LIWT": model.super_resolve(lr, s, s),
                    "Bicubic": bicubic_baseline(lr, s),
                    "Bilinear": bilinear_baseline(lr, s),
                }
                for method, pred in preds.items():
                    pred = np.clip(pred.astype(np.float64), 0.0, 1.0)
                    try:
                        ssim_val = ssim(pred, target, crop_px)
                    except ValueError as exc:
                        logger.warning("SSIM skipped for %s at x%g: %s", path, s, exc)
                        ssim_val = float("nan")
                    report.add(method, s, Path(path).name, psnr(pred, target, crop_px), ssim_val, crop_px)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_table())
    (out / "report.csv").write_text(report.to_rows())
    print(report.to_table(), end="")
    return report


def cmd_dwt_inspect(image, out) -> dict[str, float]:
    try:
        img = read_png(image)
    except OSError as exc:
        raise UsageError(f"cannot read image {image}: {exc}") from exc
    if img.shape[0] % 2 or img.shape[1] % 2:
        raise UsageError(f"dwt-inspect needs even extents, got {img.shape[0]}x{img.shape[1]}")
    gray = img.mean(axis=2, keepdims=True)
    bands = dwt(Tensor(gray))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    energies = {}
    for name, band in zip(bands._fields, bands):
        a = band.data[..., 0]
        lo, hi = float(a.min()), float(a.max())
        write_png(out / f"{name}.png", (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a))
        energies[name] = float(np.sum(a.astype(np.float64) ** 2))
    total = sum(energies.values())
    high = energies["lh"] + energies["hl"] + energies["hh"]
    shares = {k: (v / total if total > 0 else 0.0) for k, v in energies.items()}
    lines = [f"{'band':<5} {'energy':>14} {'share':>10} {'high-share':>11}"]
    for k, v in energies.items():
        hs = "" if k == "ll" else f"{(v / high if high > 0 else 0.0):>11.6f}"
        lines.append(f"{k:<5} {v:>14.6f} {shares[k]:>10.6f} {hs}")
    text = "\n".join(lines) + "\n"
    (out / "energy.txt").write_text(text)
    print(text, end="")
    return shares


def cmd_grad_check(config_path=None, seed: int = 0, threads=None) -> bool:
    cfg = load_config(config_path).model if config_path else tiny_config()
    with _threads(threads or 1):
        ops = check_ops(seed)
        groups = check_model(cfg, seed=seed)
    print(f"{'op':<14} {'max rel err':>12}  status")
    for name, err in ops.items():
        print(f"{name:<14} {err:>12.3e}  {'ok' if err < MODEL_TOLERANCE else 'FAIL'}")
    print()
    print(f"{'module':<14} {'tensors':>7} {'max rel err':>12}  status  worst tensor")
    for g in groups:
        print(f"{g.group:<14} {g.tensors:>7d} {g.max_rel_error:>12.3e}  {'ok' if g.passed else 'FAIL':<6}  {g.worst_tensor}")
    bad = [n for n, e in ops.items() if e >= MODEL_TOLERANCE] + [g.group for g in groups if not g.passed]
    if bad:
        print("gradient check FAILED: " + ", ".join(bad))
        for g in groups:
            if not g.passed:
                print(f"  {g.group}: worst parameter {g.worst_tensor}")
    else:
        print("gradient check passed")
    return not bad


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liwt", description="Arbitrary-scale wavelet implicit super-resolution")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", help="directory of PNG training images (overrides [paths] train_dir)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="run directory (overrides [paths] run_dir)")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("sr", help="super-resolve one PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--scale", required=True, help="e.g. 2, 2.2 or 2x3 (height x width)")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("eval", help="PSNR/SSIM against bicubic and bilinear baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--scale", dest="scales", default="2,3,4", help="comma-separated scales")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("dwt-inspect", help="write Haar sub-bands of an image and their energy shares")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            run = cmd_train(args.config, args.epochs, args.seed, args.threads, args.out, args.data, args.resume)
            print(run)
        elif args.command == "sr":
            cmd_sr(args.checkpoint, args.image, args.scale, args.out, args.threads)
        elif args.command == "eval":
            try:
                scales = [float(s) for s in args.scales.split(",")]
            except ValueError:
                raise UsageError(f"bad --scale list {args.scales!r}") from None
            cmd_eval(args.checkpoint, args.hr_dir, scales, args.out, args.threads)
        elif args.command == "dwt-inspect":
            cmd_dwt_inspect(args.image, args.out)
        elif args.command == "grad-check":
            return EXIT_OK if cmd_grad_check(args.config, args.seed, args.threads) else EXIT_INTERNAL
    except CheckpointError as exc:
        print(f"liwt: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (UsageError, ConfigError, DataError, ValueError) as exc:
        print(f"liwt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"liwt: training failed: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("liwt").exception("internal error")
        print(f"liwt: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
