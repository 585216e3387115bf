"""L1 training with Adam, step learning-rate decay, checkpoints and run manifests."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward, l1
from .data import CurriculumSchedule, ImageSet, TrainBatch, make_batch
from .model import CheckpointError, LiwtModel, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch: int = 4
    patch: int = 24
    queries: int = 0  # 0 means patch**2
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_step: int = 200
    checkpoint_every: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 0 or self.batch < 1 or self.patch < 2 or self.patch % 2:
            raise ValueError("epochs >= 0, batch >= 1 and an even patch >= 2 are required")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1 or self.lr_step < 1 or self.checkpoint_every < 1:
            raise ValueError("lr > 0, 0 < lr_decay <= 1, lr_step >= 1, checkpoint_every >= 1 required")

    @property
    def queries_per_patch(self) -> int:
        return self.queries or self.patch * self.patch

    def lr_at(self, epoch: int) -> float:
        return lr_at(epoch, self.lr, self.lr_decay, self.lr_step)


def lr_at(epoch: int, base: float = 1e-4, decay: float = 0.5, step: int = 200) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base * decay ** (epoch // step)


class Adam:
    """Adam with bias correction; moments are kept per named parameter."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def state(self) -> tuple[dict[str, np.ndarray], int]:
        arrays = {f"adam.m.{k}": a for k, a in self.m.items()}
        arrays.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return arrays, self.t

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            try:
                self.m[k] = arrays[f"adam.m.{k}"].astype(self.params[k].dtype)
                self.v[k] = arrays[f"adam.v.{k}"].astype(self.params[k].dtype)
            except KeyError as exc:
                raise CheckpointError(f"optimizer state missing {exc.args[0]}") from None
        self.t = int(t)


def batch_loss(model: LiwtModel, batch: TrainBatch) -> Tensor:
    """Mean absolute error over every sampled pixel and channel of the batch."""
    total = None
    count = 0
    for i in range(len(batch)):
        pred = model(Tensor(batch.lr_patches[i].astype(model.dtype)), batch.coords[i], batch.cells[i])
        item = l1(pred, Tensor(batch.gt_rgb[i].astype(model.dtype)), reduction="sum")
        total = item if total is None else total + item
        count += pred.size
    return total * (1.0 / count)


def train_step(model: LiwtModel, batch: TrainBatch, opt: Adam, lr: float, dump_dir=None) -> float:
    model.zero_grad()
    loss = batch_loss(model, batch)
    value = loss.item()
    if not np.isfinite(value):
        _dump_nonfinite(model, batch, value, dump_dir)
        raise TrainingError(f"non-finite loss {value}")
    backward(loss)
    opt.step(lr)
    return value


def _dump_nonfinite(model, batch, value, dump_dir) -> None:
    info = {
        "loss": repr(value),
        "scales": batch.scales.tolist(),
        "lr_patch_finite": bool(np.all(np.isfinite(batch.lr_patches))),
        "params": {n: {"finite": bool(np.all(np.isfinite(t.data))), "absmax": float(np.max(np.abs(t.data)))}
                   for n, t in model.named_parameters()},
    }
    if dump_dir is not None:
        path = Path(dump_dir) / "nonfinite_dump.json"
        path.write_text(json.dumps(info, indent=1))
        logger.error("non-finite loss; diagnostics written to %s", path)
    else:
        logger.error("non-finite loss: %s", json.dumps(info)[:2000])


@dataclass
class RunManifest:
    """Append-only JSON-lines record of a run."""

    path: Path
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        return cls(path, records)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if r.get("kind") == "epoch"]

    @property
    def checkpoints(self) -> list[str]:
        return [r["path"] for r in self.records if r.get("kind") == "checkpoint"]

    @property
    def config(self) -> dict:
        for r in self.records:
            if r.get("kind") == "config":
                return r["config"]
        raise KeyError("manifest has no config record")


def _checkpoint(model, opt, run_dir: Path, epoch: int, manifest: RunManifest, seed: int) -> Path:
    arrays, t = opt.state()
    path = run_dir / f"ckpt_e{epoch:05d}.liwt"
    try:
        save_checkpoint(model, path, extra=arrays, meta={"epoch": epoch, "adam_step": t, "seed": seed})
    except CheckpointError as exc:
        raise TrainingError(str(exc)) from exc
    manifest.append({"kind": "checkpoint", "epoch": epoch, "path": path.name})
    return path


def fit(
    model: LiwtModel,
    images: ImageSet,
    sched: CurriculumSchedule,
    cfg: TrainConfig,
    run_dir,
    config_record: dict | None = None,
    resume: str | Path | None = None,
) -> RunManifest:
    """Train for ``cfg.epochs`` epochs, writing checkpoints and a manifest into ``run_dir``.

    Each epoch draws its randomness from ``default_rng([seed, epoch])`` so a run
    resumed from a checkpoint continues exactly as the uninterrupted run would.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "manifest.jsonl"
    if resume is not None and manifest_path.exists():
        # continuing in place: keep the history and append after it
        manifest = RunManifest.load(manifest_path)
    else:
        manifest_path.unlink(missing_ok=True)
        manifest = RunManifest(manifest_path)
        manifest.append({"kind": "config", "config": config_record or {"train": asdict(cfg)}, "seed": cfg.seed})
    opt = Adam(model.named_parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    start = 0
    if resume is not None:
        loaded, extra, meta = load_checkpoint(resume, model.config)
        for (name, dst), (_, src) in zip(model.named_parameters(), loaded.named_parameters()):
            dst.data = src.data.copy()
        opt.load_state(extra, meta.get("adam_step", 0))
        start = int(meta.get("epoch", 0))
        manifest.append({"kind": "resume", "from": str(resume), "epoch": start})
    else:
        _checkpoint(model, opt, run_dir, 0, manifest, cfg.seed)

    loss_log = run_dir / "loss.csv"
    if start == 0 or not loss_log.exists():
        loss_log.write_text("epoch,loss,lr\n")
    n = len(images)
    for epoch in range(start, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        step_losses = []
        for b in range(0, n, cfg.batch):
            batch = make_batch(images, order[b:b + cfg.batch], sched, epoch, cfg.epochs, cfg.patch, rng,
                               cfg.queries_per_patch)
            step_losses.append(train_step(model, batch, opt, lr, dump_dir=run_dir))
        loss = float(np.mean(step_losses))
        manifest.append({"kind": "epoch", "epoch": epoch, "loss": loss, "lr": lr, "steps": len(step_losses)})
        with open(loss_log, "a") as fh:
            fh.write(f"{epoch},{loss!r},{lr!r}\n")
        logger.info("epoch %d  loss %.6f  lr %.3g", epoch, loss, lr)
        done = epoch + 1
        if done % cfg.checkpoint_every == 0 or done == cfg.epochs:
            _checkpoint(model, opt, run_dir, done, manifest, cfg.seed)
    return manifest
