"""YAML run configuration with line-anchored validation errors."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .denoiser import TrainConfig
from .diffusion import ScheduleKind, build_schedule
from .errors import BadParams, ConfigError
from .synth.generator import ARCHETYPES
from .synth.records import Provenance


@dataclass(frozen=True)
class GeneratorSection:
    n: int = 100
    seed: int = 0
    width: int = 64
    archetypes: tuple = tuple(ARCHETYPES)
    clutter_max: int = 3
    twin: bool = False
    sigma_track: float = 0.0
    sigma_hand: float = 0.0
    provenance: str = "synthetic"


@dataclass(frozen=True)
class ScheduleSection:
    kind: str = "scaled_linear"
    n_steps: int = 100
    beta_start: float = 8.5e-4
    beta_end: float = 0.12  # reaches abar_N ~ 0.01 in 100 steps
    s: float = 0.008

    def build(self):
        return build_schedule(self.kind, self.n_steps, self.beta_start, self.beta_end, self.s)


@dataclass(frozen=True)
class CurateSection:
    k_max: int = 2
    gmm_seed: int = 0
    min_success: float = 0.9


@dataclass(frozen=True)
class TrainSection:
    holdout: float = 0.0
    eval_every: int = 0
    eval_samples: int = 64


@dataclass(frozen=True)
class EvalSection:
    sigma_h: float = 8.0
    samples_per_scene: int = 8
    seed: int = 0


@dataclass(frozen=True)
class PathsSection:
    dataset: str | None = None
    model: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorSection = GeneratorSection()
    schedule_loc: ScheduleSection = ScheduleSection()
    schedule_rot: ScheduleSection = ScheduleSection(kind="squared_cosine")
    model: TrainConfig = TrainConfig()
    curate: CurateSection = CurateSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()
    source: str | None = field(default=None, compare=False)

    def schedules(self):
        return self.schedule_loc.build(), self.schedule_rot.build()


# (section key in the file, RunConfig attribute, section type)
_SECTIONS = {
    "generator": ("generator", GeneratorSection),
    "model": ("model", TrainConfig),
    "curate": ("curate", CurateSection),
    "train": ("train", TrainSection),
    "eval": ("eval", EvalSection),
    "paths": ("paths", PathsSection),
}

_RANGES = {
    ("generator", "n"): (0, None),
    ("generator", "width"): (16, 1024),
    ("generator", "clutter_max"): (0, 8),
    ("generator", "sigma_track"): (0.0, 50.0),
    ("generator", "sigma_hand"): (0.0, 0.05),
    ("curate", "k_max"): (1, 16),
    ("curate", "min_success"): (0.0, 1.0),
    ("train", "holdout"): (0.0, 0.9),
    ("train", "eval_every"): (0, None),
    ("train", "eval_samples"): (1, None),
    ("eval", "sigma_h"): (1e-3, 1e3),
    ("eval", "samples_per_scene"): (1, 1024),
    ("schedule", "n_steps"): (1, 10000),
}


def _line(node) -> int:
    return node.start_mark.line + 1


_TYPE_NAMES = {int: "an integer", float: "a number", str: "a string", bool: "true/false"}


def _scalar(node, want: type, where: str, path):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{where}: expected {_TYPE_NAMES[want]}", _line(node), path)
    value = yaml.safe_load(yaml.serialize(node))
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if want is float and isinstance(value, str):
        # YAML 1.1 reads exponent forms without a dot ("1e-3") as strings
        try:
            value = float(value)
        except ValueError:
            pass
    if want is str and value is None:
        return None
    if want is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected true/false, got {value!r}", _line(node), path)
    if want in (int, float) and (isinstance(value, bool) or not isinstance(value, want)):
        raise ConfigError(f"{where}: expected {_TYPE_NAMES[want]}, got {value!r}", _line(node), path)
    if want is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}", _line(node), path)
    return value


def _field_type(cls, name):
    default = next(f for f in fields(cls) if f.name == name).default
    if isinstance(default, bool):
        return bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return tuple
    return str


def _mapping(node, where, path) -> dict:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{where}: expected a mapping", _line(node), path)
    out = {}
    for k, v in node.value:
        key = k.value if isinstance(k, yaml.ScalarNode) else None
        if key in out:
            raise ConfigError(f"{where}: duplicate key {key!r}", _line(k), path)
        out[key] = (k, v)
    return out


def _section(cls, node, where, path, range_key):
    values = {}
    names = {f.name for f in fields(cls)}
    for key, (knode, vnode) in _mapping(node, where, path).items():
        if key not in names:
            raise ConfigError(f"{where}: unknown key {key!r}", _line(knode), path)
        typ = _field_type(cls, key)
        if typ is tuple:
            if not isinstance(vnode, yaml.SequenceNode):
                raise ConfigError(f"{where}.{key}: expected a list", _line(vnode), path)
            val = tuple(_scalar(item, str, f"{where}.{key}", path) for item in vnode.value)
        else:
            val = _scalar(vnode, typ, f"{where}.{key}", path)
        lo, hi = _RANGES.get((range_key, key), (None, None))
        if lo is not None and val < lo or hi is not None and val > hi:
            raise ConfigError(f"{where}.{key}: {val} outside [{lo}, {hi if hi is not None else 'inf'}]",
                              _line(vnode), path)
        values[key] = (val, vnode)
    try:
        obj = cls(**{k: v for k, (v, _) in values.items()})
    except (BadParams, ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}", _line(node), path) from exc
    return obj, values


def _check_generator(gen: GeneratorSection, values, path):
    for name in gen.archetypes:
        if name not in ARCHETYPES:
            raise ConfigError(f"generator.archetypes: unknown archetype {name!r}", _line(values["archetypes"][1]), path)
    try:
        Provenance(gen.provenance)
    except ValueError:
        line = _line(values["provenance"][1]) if "provenance" in values else None
        raise ConfigError(f"generator.provenance: unknown provenance {gen.provenance!r}", line, path) from None


def _schedules(node, path, base: RunConfig):
    out = {"loc": base.schedule_loc, "rot": base.schedule_rot}
    for key, (knode, vnode) in _mapping(node, "schedules", path).items():
        if key not in out:
            raise ConfigError(f"schedules: unknown component {key!r} (expected loc or rot)", _line(knode), path)
        sec, values = _section(ScheduleSection, vnode, f"schedules.{key}", path, "schedule")
        try:
            ScheduleKind(sec.kind)
        except ValueError:
            line = _line(values["kind"][1]) if "kind" in values else _line(vnode)
            raise ConfigError(f"schedules.{key}.kind: unknown schedule {sec.kind!r}", line, path) from None
        try:
            sec.build()
        except BadParams as exc:
            raise ConfigError(f"schedules.{key}: {exc}", _line(vnode), path) from exc
        out[key] = sec
    if out["loc"].n_steps != out["rot"].n_steps:
        raise ConfigError("schedules: loc and rot must use the same n_steps", _line(node), path)
    return out["loc"], out["rot"]


def parse_config(text: str, path=None) -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark is not None else None, path) from exc
    cfg = RunConfig(source=str(path) if path is not None else None)
    if root is None:
        return cfg
    updates = {}
    for key, (knode, vnode) in _mapping(root, "config", path).items():
        if key == "schedules":
            updates["schedule_loc"], updates["schedule_rot"] = _schedules(vnode, path, cfg)
            continue
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section {key!r}", _line(knode), path)
        attr, cls = _SECTIONS[key]
        sec, values = _section(cls, vnode, key, path, key)
        if key == "generator":
            _check_generator(sec, values, path)
        updates[attr] = sec
    return replace(cfg, **updates)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError("config file not found", None, p) from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, p) from exc
    return parse_config(text, p)
