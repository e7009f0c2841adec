"""Experiment configuration files.

The format is ``key = value`` lines grouped under ``[data]``, ``[experiment]``
and ``[train]`` headers, with ``#`` comments. Every ``[train]`` key must name
a :class:`~dualcycle.trainer.TrainConfig` field.

Example::

    [data]
    dir = data/e2e
    subset = 1000
    test_mrs = 200

    [experiment]
    scheme = f
    seeds = 13, 42, 1337
    out = runs/f

    [train]
    epochs = 10
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .trainer import SCHEME_IDS, TrainConfig

DEFAULT_SEEDS = (13, 42, 1337)
_SECTIONS = ("data", "experiment", "train")


@dataclass
class DataConfig:
    dir: str = "data"
    train_file: str = "trainset.csv"
    test_file: str = "testset_w_refs.csv"
    subset: int | None = None
    test_mrs: int | None = None
    max_len: int = 60
    min_freq: int = 2


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    scheme: str = "f"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    out: str = "runs/default"
    train: dict = field(default_factory=dict)  # TrainConfig overrides

    def __post_init__(self):
        if self.scheme not in SCHEME_IDS:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {', '.join(SCHEME_IDS)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        # validate overrides eagerly so a bad key fails before any work starts
        self.train_config(self.seeds[0])

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig.from_dict({**self.train, "scheme": self.scheme, "seed": seed})

    def to_text(self) -> str:
        """Canonical echo; parsing it back gives an equal config."""
        lines = ["[data]"]
        for f in dataclasses.fields(DataConfig):
            v = getattr(self.data, f.name)
            if v is not None:
                lines.append(f"{f.name} = {v}")
        lines += ["", "[experiment]", f"scheme = {self.scheme}",
                  f"seeds = {', '.join(map(str, self.seeds))}", f"out = {self.out}", "", "[train]"]
        resolved = dataclasses.asdict(self.train_config(self.seeds[0]))
        for k in sorted(resolved):
            if k in ("scheme", "seed"):
                continue
            lines.append(f"{k} = {_fmt(resolved[k])}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "none" if v is None else str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    args = typing.get_args(typ)
    if raw.lower() == "none" and type(None) in args:
        return None
    if args:
        typ = next(a for a in args if a is not type(None))
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {typ.__name__}") from None
    return raw


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {' '.join(str(exc).split())}") from None
    unknown = [s for s in cp.sections() if s not in _SECTIONS]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}")

    data_kw = {}
    if cp.has_section("data"):
        hints = _hints(DataConfig)
        for k, v in cp.items("data"):
            if k not in hints:
                raise ConfigError(f"{source}: unknown [data] key {k!r}")
            data_kw[k] = _coerce(v, hints[k], f"data.{k}")

    exp_kw: dict = {}
    if cp.has_section("experiment"):
        for k, v in cp.items("experiment"):
            if k == "scheme":
                exp_kw["scheme"] = v.strip()
            elif k == "seeds":
                try:
                    exp_kw["seeds"] = tuple(int(s) for s in v.replace(",", " ").split())
                except ValueError:
                    raise ConfigError(f"{source}: seeds must be integers, got {v!r}") from None
            elif k == "out":
                exp_kw["out"] = v.strip()
            else:
                raise ConfigError(f"{source}: unknown [experiment] key {k!r}")

    train_kw = {}
    if cp.has_section("train"):
        hints = _hints(TrainConfig)
        for k, v in cp.items("train"):
            if k not in hints or k in ("scheme", "seed"):
                raise ConfigError(f"{source}: unknown [train] key {k!r}")
            train_kw[k] = _coerce(v, hints[k], f"train.{k}")
    return ExperimentConfig(DataConfig(**data_kw), train=train_kw, **exp_kw)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
