"""Run configuration stored as a flat ``key=value`` text file.

Keys are grouped by prefix::

    seed=0
    scheme=all
    report=text
    model.levels=5
    model.encoder_channels=8,16,32,64,128,128
    train.lr0=0.02
    data.task=synthetic

Blank lines and ``#`` comments are ignored. Unknown keys are an error so typos
do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, IoError
from .model import QgnConfig, Scheme
from .train import TrainConfig

REPORT_FORMATS = ("text", "csv")
TASKS = ("synthetic", "halves", "files")


@dataclass
class DataConfig:
    task: str = "synthetic"
    width: int = 64
    height: int = 64
    n_train: int = 32
    n_val: int = 16
    n_shapes: int = 3
    noise: float = 0.1
    dir: str = ""  # QMR1 masks used when task=files


@dataclass
class RunConfig:
    subcommand: str = ""
    input: str = ""
    output: str = ""
    gt: str = ""
    seed: int = 0
    scheme: str = "all"
    report: str = "text"
    model: QgnConfig = field(default_factory=QgnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> RunConfig:
        Scheme.parse(self.scheme)
        if self.report not in REPORT_FORMATS:
            raise ConfigError(f"report must be one of {REPORT_FORMATS}")
        if self.data.task not in TASKS:
            raise ConfigError(f"data.task must be one of {TASKS}")
        if self.data.task == "halves":
            self.model.num_classes = 2
        # the master seed drives both initialisation and data order
        self.model.seed = self.seed
        self.train.seed = self.seed
        self.model.__post_init__()
        self.train.__post_init__()
        return self

    def to_text(self) -> str:
        lines = []
        for key, value in _items(self):
            lines.append(f"{key}={_format(value)}")
        return "\n".join(lines) + "\n"

    def apply(self, key: str, raw: str) -> None:
        """Set one dotted key from its text form."""
        section, _, name = key.rpartition(".")
        target = getattr(self, section) if section else self
        if section not in ("", "model", "train", "data") or name not in _field_types(target):
            raise ConfigError(f"unknown config key {key!r}")
        if (section, name) in (("model", "seed"), ("train", "seed")):
            raise ConfigError(f"{key} is derived from the top-level seed")
        setattr(target, name, _parse(raw, _field_types(target)[name], key))

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {n}: expected key=value")
            cfg.apply(key.strip(), value.strip())
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise IoError(f"cannot read config {path}: {e}") from e
        return cls.from_text(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _field_types(obj) -> dict:
    defaults = type(obj)()
    return {
        f.name: type(getattr(defaults, f.name))
        for f in dataclasses.fields(obj)
        if not dataclasses.is_dataclass(getattr(defaults, f.name))
    }


def _items(cfg: RunConfig):
    for name in _field_types(cfg):
        yield name, getattr(cfg, name)
    for section in ("model", "train", "data"):
        obj = getattr(cfg, section)
        for name in _field_types(obj):
            if name != "seed":
                yield f"{section}.{name}", getattr(obj, name)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, kind: type, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
