"""Run configuration: a flat ``section.key = value`` text file."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import SyntheticSpec
from .model import LossWeights, ModelDims, R2AConfig
from .rationalizer import RationalizerConfig, RationalizerWeights
from .trainer import LAMBDA_GRID, TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    data_dir: str = "data"
    output_dir: str = "runs"
    embeddings: str = ""
    vocab: str = ""


@dataclass
class DataSection:
    source_tasks: tuple = ("aspect0", "aspect1")
    target_task: str = "aspect2"
    target_train_size: int = 50
    kind: str = "classification"


@dataclass
class R2ASection:
    epochs: int = 8
    batch_size: int = 32
    lr: float = 1e-3
    critic_lr: float = 1e-3
    critic_iters: int = 5
    penalty: float = 10.0


@dataclass
class RationalizerSection:
    hidden: int = 200
    tau: float = 1.0
    sparsity: float = 0.3
    coherence: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class TargetSection:
    supervision: str = "generated"
    tune: bool = True
    lambda_grid: tuple = LAMBDA_GRID
    lambda_att: float = 1.0


@dataclass
class CurveSection:
    sizes: tuple = (25, 50, 100, 200)
    modes: tuple = ("none", "rationale", "generated")


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "domain-transfer"
    paths: Paths = field(default_factory=Paths)
    data: DataSection = field(default_factory=DataSection)
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelDims = field(default_factory=ModelDims)
    r2a: R2ASection = field(default_factory=R2ASection)
    rationalizer: RationalizerSection = field(default_factory=RationalizerSection)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    target: TargetSection = field(default_factory=TargetSection)
    curve: CurveSection = field(default_factory=CurveSection)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    # ----------------------------------------------------- per-stage settings
    def dims(self):
        return ModelDims(**dataclasses.asdict(self.model))

    def r2a_config(self):
        r = self.r2a
        return R2AConfig(epochs=r.epochs, batch_size=r.batch_size, lr=r.lr,
                         critic_lr=r.critic_lr, critic_iters=r.critic_iters, penalty=r.penalty,
                         mode=self.mode, seed=self.seed, dims=self.dims())

    def rationalizer_config(self):
        r = self.rationalizer
        return RationalizerConfig(hidden=r.hidden, tau=r.tau, epochs=r.epochs,
                                  batch_size=r.batch_size, lr=r.lr, dropout=self.model.dropout,
                                  seed=self.seed)

    def rationalizer_weights(self):
        return RationalizerWeights(self.rationalizer.sparsity, self.rationalizer.coherence)

    def train_schedule(self):
        return TrainSchedule(**dataclasses.asdict(self.schedule))

    # ----------------------------------------------------------------- edits
    def set(self, key, raw):
        parts = key.split(".")
        obj = self
        for p in parts[:-1]:
            if not dataclasses.is_dataclass(obj) or not hasattr(obj, p):
                raise ConfigError(f"unknown config section {key!r}")
            obj = getattr(obj, p)
        name = parts[-1]
        if not dataclasses.is_dataclass(obj) or name not in {f.name for f in
                                                             dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(obj, name)
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{key!r} is a section, not a value")
        try:
            setattr(obj, name, _coerce(raw, current))
        except ValueError as err:
            raise ConfigError(f"{key}: {err}") from err

    def items(self):
        yield from _flatten(self, "")

    def to_text(self):
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.items())

    @classmethod
    def from_text(cls, text, overrides=()):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, value = (s.strip() for s in item.split("=", 1))
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides=()):
        return cls.from_text(Path(path).read_text(encoding="utf-8"), overrides)

    # ------------------------------------------------------------ validation
    def validate(self):
        if self.mode not in ("domain-transfer", "aspect-transfer"):
            raise ConfigError(f"mode must be domain-transfer or aspect-transfer, not {self.mode!r}")
        if self.mode == "aspect-transfer" and self.loss.wd != 0:
            raise ConfigError("aspect-transfer requires loss.wd = 0")
        try:
            self.loss.validate()
            RationalizerWeights(self.rationalizer.sparsity, self.rationalizer.coherence).validate()
            TrainSchedule(**dataclasses.asdict(self.schedule))
        except ValueError as err:
            raise ConfigError(str(err)) from err
        if self.target.supervision not in ("none", "rationale", "generated", "oracle"):
            raise ConfigError(f"unknown target.supervision {self.target.supervision!r}")
        if self.data.target_train_size < 1:
            raise ConfigError("data.target_train_size must be positive")
        if self.model.bins < 1:
            raise ConfigError("model.bins must be positive")
        return self

    def require_paths(self, *paths):
        for p in paths:
            if not Path(p).exists():
                raise ConfigError(f"required path does not exist: {p}")


def _flatten(obj, prefix):
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if dataclasses.is_dataclass(val):
            yield from _flatten(val, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", val


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _scalar(raw, like):
    if isinstance(like, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def _coerce(raw, current):
    raw = raw.strip()
    if isinstance(current, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        like = current[0] if current else ""
        if isinstance(like, (int, float)) and not isinstance(like, bool):
            # numeric tuples: keep ints where every entry is integral
            vals = [float(s) for s in items]
            if isinstance(like, int) and all(v.is_integer() for v in vals):
                return tuple(int(v) for v in vals)
            return tuple(vals)
        return tuple(items)
    return _scalar(raw, current)
