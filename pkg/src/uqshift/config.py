"""Run configuration: flat ``section.key = value`` text files.

Lines are UTF-8; ``#`` starts a comment; blank lines are ignored. Shifts are
listed either one key at a time::

    shift.0.kind = blur
    shift.0.level = 0.3
    shift.0.seed = 0

or as a sweep shorthand, ``sweep.blur = 0.3, 0.6, 0.9``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError, PathError, ValidationError
from .models import ModelConfig
from .shifts import KINDS, ShiftSpec
from .uq_methods import METHODS

_LINE = re.compile(r"^([A-Za-z_][\w]*(?:\.[\w]+)+)\s*=\s*(.*)$")


@dataclass
class DatasetSection:
    size: int = 32
    num_images: int = 96
    train: int = 64
    val: int = 16
    test: int = 16
    noise: float = 0.05
    seed: int | None = None
    manifest_dir: str | None = None


@dataclass
class MethodSection:
    name: str = "MAP"
    samples: int = 8
    batch_size: int = 2
    # SGD methods
    epochs: int = 15
    lr: float = 0.03
    momentum: float = 0.9
    seeds: list[int] = field(default_factory=list)
    eval_dropout_rate: float | None = None  # None: pick from eval_dropout_grid by validation Dice
    eval_dropout_grid: str = "0.01,0.05,0.1,0.2,0.3"
    # cSGHMC
    lr0: float = 2e-6
    beta: float = 0.9
    cycle_length: int = 5
    cycles: int = 10
    burn_in_epochs: int = 10
    noise_start_epoch: int = 1
    pixel_likelihood: str = "sum"
    train_dropout_rate: float | None = None
    seed: int | None = None

    def dropout_grid(self) -> list[float]:
        return [float(v) for v in self.eval_dropout_grid.replace(" ", "").split(",") if v]


@dataclass
class EvalSection:
    ece_bins: int = 15
    hist_bins: int = 10
    diversity_subset: int = 6
    kde_points: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str | None = None
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    method: MethodSection = field(default_factory=MethodSection)
    shifts: list[ShiftSpec] = field(default_factory=list)
    eval: EvalSection = field(default_factory=EvalSection)
    text: str = ""

    @property
    def data_seed(self) -> int:
        return self.seed if self.dataset.seed is None else self.dataset.seed

    @property
    def train_seed(self) -> int:
        return self.seed if self.method.seed is None else self.method.seed

    def synth_config(self) -> SynthConfig:
        d = self.dataset
        return SynthConfig(size=d.size, num_images=d.num_images, noise=d.noise, seed=self.data_seed)

    def fractions(self) -> tuple[float, float, float]:
        d = self.dataset
        total = d.train + d.val + d.test
        if total != d.num_images:
            raise ConfigError(f"dataset.train+val+test = {total} but dataset.num_images = {d.num_images}")
        return (d.train / total, d.val / total, d.test / total)

    def model_config(self) -> ModelConfig:
        m = self.model
        rate = m.dropout_rate if self.method.train_dropout_rate is None else self.method.train_dropout_rate
        return replace(m, dropout_rate=rate, seed=self.train_seed)

    def de_seeds(self) -> list[int]:
        if self.method.seeds:
            return list(self.method.seeds)
        return [self.train_seed + i for i in range(self.method.samples)]

    def digest(self) -> str:
        payload = repr((asdict(self.dataset), asdict(self.model), asdict(self.method),
                        [s.to_json() for s in self.shifts], asdict(self.eval), self.seed))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.digest(), "seed": self.seed, "data_seed": self.data_seed,
                "train_seed": self.train_seed, "method": self.method.name}


def _coerce(raw: str, typ, key: str):
    raw = raw.strip()
    text = str(typ)
    try:
        if "list" in text:
            return [int(v) for v in raw.replace(" ", "").split(",") if v]
        if raw.lower() in ("none", "") and "None" in text:
            return None
        if "bool" in text:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if "int" in text and "float" not in text:
            return int(raw)
        if "float" in text:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {text}") from None


def _assign(obj, key: str, name: str, raw: str):
    types = {f.name: f.type for f in fields(obj)}
    if name not in types:
        raise ConfigError(f"unknown key {key!r}")
    setattr(obj, name, _coerce(raw, types[name], key))


def parse_lines(lines, overrides=()) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        m = _LINE.match(stripped)
        if not m:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line.strip()!r}")
        values[m.group(1)] = m.group(2).strip()
    for item in overrides:
        m = _LINE.match(item.strip())
        if not m:
            raise ConfigError(f"override {item!r}: expected 'section.key=value'")
        values[m.group(1)] = m.group(2).strip()
    return values


def build(values: dict[str, str], text: str = "") -> RunConfig:
    cfg = RunConfig(text=text)
    model_kwargs = {}
    shift_parts: dict[int, dict[str, str]] = {}
    sweeps: list[tuple[str, str]] = []
    for key, raw in values.items():
        section, _, rest = key.partition(".")
        if section == "run":
            if rest == "seed":
                cfg.seed = _coerce(raw, int, key)
            elif rest == "out":
                cfg.out_dir = raw
            else:
                raise ConfigError(f"unknown key {key!r}")
        elif section == "dataset":
            _assign(cfg.dataset, key, rest, raw)
        elif section == "model":
            types = {f.name: f.type for f in fields(ModelConfig)}
            if rest not in types or rest == "seed":
                raise ConfigError(f"unknown key {key!r}")
            model_kwargs[rest] = _coerce(raw, types[rest], key)
        elif section == "method":
            _assign(cfg.method, key, rest, raw)
        elif section == "eval":
            _assign(cfg.eval, key, rest, raw)
        elif section == "shift":
            idx, _, field_name = rest.partition(".")
            if not idx.isdigit() or field_name not in ("kind", "level", "seed"):
                raise ConfigError(f"bad shift key {key!r}; use shift.<i>.kind|level|seed")
            shift_parts.setdefault(int(idx), {})[field_name] = raw
        elif section == "sweep":
            sweeps.append((rest, raw))
        else:
            raise ConfigError(f"unknown section in key {key!r}")
    try:
        cfg.model = ModelConfig(**model_kwargs)
        specs = []
        for idx in sorted(shift_parts):
            part = shift_parts[idx]
            if "kind" not in part:
                raise ConfigError(f"shift.{idx} has no kind")
            specs.append(ShiftSpec(part["kind"], _coerce(part.get("level", "0"), float, f"shift.{idx}.level"),
                                   _coerce(part.get("seed", "0"), int, f"shift.{idx}.seed")))
        for kind, raw in sweeps:
            if kind not in KINDS:
                raise ConfigError(f"sweep.{kind}: unknown shift kind")
            for v in raw.replace(" ", "").split(","):
                if v:
                    specs.append(ShiftSpec(kind, _coerce(v, float, f"sweep.{kind}"), cfg.seed))
        cfg.shifts = specs
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    m = cfg.method
    if m.name not in METHODS:
        raise ConfigError(f"method.name must be one of {METHODS}, got {m.name!r}")
    if m.pixel_likelihood not in ("sum", "mean"):
        raise ConfigError("method.pixel_likelihood must be 'sum' or 'mean'")
    try:
        grid = m.dropout_grid()
    except ValueError:
        raise ConfigError(f"method.eval_dropout_grid: bad list {m.eval_dropout_grid!r}") from None
    if not grid or any(not 0 < r < 1 for r in grid):
        raise ConfigError("method.eval_dropout_grid needs rates in (0, 1)")
    if m.samples < 1:
        raise ConfigError("method.samples must be >= 1")
    if m.name == "DE" and len(cfg.de_seeds()) != len(set(cfg.de_seeds())):
        raise ConfigError("method.seeds must be distinct")
    cfg.fractions()
    d = cfg.dataset
    if d.manifest_dir is not None and not Path(d.manifest_dir).is_dir():
        raise PathError(f"dataset.manifest_dir {d.manifest_dir} does not exist")


def load(path, overrides=(), seed: int | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise PathError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    values = parse_lines(text.splitlines(), overrides)
    if seed is not None:
        values["run.seed"] = str(seed)
    return build(values, text)


def loads(text: str, overrides=()) -> RunConfig:
    return build(parse_lines(text.splitlines(), overrides), text)
