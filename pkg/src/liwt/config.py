"""Run configuration: INI-style ``key = value`` sections, strictly validated."""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import CurriculumSchedule
from .model import ConfigError, ModelConfig
from .training import TrainConfig

_SECTIONS = {"model": ModelConfig, "train": TrainConfig}
_CURRICULUM_KEYS = {"boundaries", "ranges"}
_PATH_KEYS = {"train_dir", "run_dir"}
_RUNTIME_KEYS = {"threads"}


@dataclass(frozen=True)
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    curriculum: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    train_dir: str = ""
    run_dir: str = "runs/default"
    threads: int = 1

    @classmethod
    def large(cls) -> "Config":
        return cls(
            model=ModelConfig.large(),
            train=TrainConfig(epochs=1000, batch=32, patch=48, lr=1e-4, lr_decay=0.5, lr_step=200,
                              checkpoint_every=50),
        )

    def with_overrides(self, **kw) -> "Config":
        train_kw = {k: v for k, v in kw.items() if k in {f.name for f in fields(TrainConfig)} and v is not None}
        top_kw = {k: v for k, v in kw.items() if k in {"train_dir", "run_dir", "threads"} and v is not None}
        for key in ("train_dir", "run_dir"):
            if key in top_kw:
                top_kw[key] = str(top_kw[key])  # callers may pass Path objects
        try:
            return replace(self, train=replace(self.train, **train_kw), **top_kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_record(self) -> dict:
        """JSON-able snapshot (used in run manifests)."""
        return {
            "model": asdict(self.model),
            "train": asdict(self.train),
            "curriculum": {"boundaries": list(self.curriculum.boundaries),
                           "ranges": [list(r) for r in self.curriculum.ranges]},
            "paths": {"train_dir": self.train_dir, "run_dir": self.run_dir},
            "runtime": {"threads": self.threads},
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Config":
        try:
            cur = rec.get("curriculum", {})
            sched = CurriculumSchedule(
                boundaries=tuple(cur.get("boundaries", (0.25, 0.5))),
                ranges=tuple(tuple(r) for r in cur.get("ranges", ((1.0, 4.0), (1.0, 6.0), (1.0, 8.0)))),
            )
            return cls(
                model=ModelConfig(**rec.get("model", {})),
                train=TrainConfig(**rec.get("train", {})),
                curriculum=sched,
                train_dir=rec.get("paths", {}).get("train_dir", ""),
                run_dir=rec.get("paths", {}).get("run_dir", "runs/default"),
                threads=int(rec.get("runtime", {}).get("threads", 1)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config record: {exc}") from exc

    def dumps(self) -> str:
        rec = self.to_record()
        out = []
        for section in ("model", "train"):
            out.append(f"[{section}]")
            out += [f"{k} = {v}" for k, v in rec[section].items()]
            out.append("")
        out.append("[curriculum]")
        out.append("boundaries = " + ", ".join(repr(b) for b in self.curriculum.boundaries))
        out.append("ranges = " + ", ".join(f"{lo!r}:{hi!r}" for lo, hi in self.curriculum.ranges))
        out.append("")
        out.append("[paths]")
        out.append(f"train_dir = {self.train_dir}")
        out.append(f"run_dir = {self.run_dir}")
        out.append("")
        out.append("[runtime]")
        out.append(f"threads = {self.threads}")
        return "\n".join(out) + "\n"


def _convert(section: str, key: str, raw: str, target_type):
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {target_type.__name__}, got {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<string>") -> Config:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    known = set(_SECTIONS) | {"curriculum", "paths", "runtime"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"{source}: unknown section [{section}]")

    parts = {}
    for section, cls in _SECTIONS.items():
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in types:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
                kw[key] = _convert(section, key, raw, {"int": int, "float": float}.get(types[key], str))
        try:
            parts[section] = cls(**kw)
        except ValueError as exc:
            raise ConfigError(f"{source}: [{section}] {exc}") from exc

    sched = CurriculumSchedule()
    if parser.has_section("curriculum"):
        items = dict(parser.items("curriculum"))
        unknown = set(items) - _CURRICULUM_KEYS
        if unknown:
            raise ConfigError(f"{source}: unknown key {sorted(unknown)[0]!r} in [curriculum]")
        try:
            bounds = tuple(float(b) for b in items.get("boundaries", "0.25, 0.5").split(",") if b.strip())
            ranges = tuple(
                tuple(float(v) for v in r.split(":")) for r in items.get("ranges", "1:4, 1:6, 1:8").split(",")
            )
            sched = CurriculumSchedule(bounds, ranges)
        except ValueError as exc:
            raise ConfigError(f"{source}: [curriculum] {exc}") from exc

    top = {}
    for section, keys in (("paths", _PATH_KEYS), ("runtime", _RUNTIME_KEYS)):
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in keys:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
                top[key] = _convert(section, key, raw, int) if key == "threads" else raw
    return Config(model=parts["model"], train=parts["train"], curriculum=sched, **top)


def load_config(path) -> Config:
    """Read an INI config, or the config record of a run manifest (``*.jsonl``)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if path.suffix == ".jsonl":
        for line in text.splitlines():
            rec = json.loads(line)
            if rec.get("kind") == "config":
                return Config.from_record(rec["config"])
        raise ConfigError(f"{path}: manifest has no config record")
    return parse_config(text, str(path))
