"""Declarative experiment configuration (TOML with ${ENV} interpolation)."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..domain import ModifierKind
from ..engine.schedules import SCHEDULES, get_schedule
from ..prompting import Strategy

TASKS = ("segmentation", "depth", "detection")
DATASETS = ("synthetic", "voc", "voc_det", "ade20k", "cityscapes", "dark_zurich", "nyu", "watercolor", "comic")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    name: str = "synthetic"
    root: str = ""
    split: str = "train"
    eval_split: str | None = None
    image_size: int = 64
    limit: int | None = None


@dataclass
class BuilderSpec:
    strategy: str = "ClassNames"
    vocab: str | None = None  # builtin vocabulary name or classes file; defaults to the dataset's
    template: str = "a photo of a {}."
    min_tokens: int = 0
    cache: str | None = None
    precision: float = 1.0
    recall: float = 1.0
    pad_to: int | None = None


@dataclass
class ModifierSpec:
    kind: str = "Null"
    domain: str | None = None
    token_file: str | None = None
    checkpoint: str | None = None
    image_set: str | None = None
    steps: int | None = None
    learning_rate: float | None = None


@dataclass
class ScheduleSpec:
    name: str = "ade_fast_4k"
    overrides: dict = field(default_factory=dict)
    log_every: int = 10
    eval_every: int = 0
    checkpoint_every: int = 0
    multi_scale: bool = False
    scales: list[float] = field(default_factory=lambda: [0.75, 1.0, 1.25])
    flip: bool = True


@dataclass
class BackboneSpec:
    spec: str = "stub:0"
    train: bool = True


@dataclass
class HeadSpec:
    fpn_channels: int = 256
    decoder_channels: int = 128
    min_depth: float = 1e-3
    max_depth: float = 10.0
    depth_lambda: float = 0.5
    anchor_scale: float = 4.0
    representation_size: int = 1024


_SECTIONS = {
    "dataset": DatasetSpec,
    "builder": BuilderSpec,
    "modifier": ModifierSpec,
    "schedule": ScheduleSpec,
    "backbone": BackboneSpec,
    "head": HeadSpec,
}


@dataclass
class ExperimentConfig:
    name: str
    task: str = "segmentation"
    seed: int = 0
    output: str = "."
    fixture_dir: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    builder: BuilderSpec = field(default_factory=BuilderSpec)
    modifier: ModifierSpec = field(default_factory=ModifierSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    head: HeadSpec = field(default_factory=HeadSpec)

    # construction

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> "ExperimentConfig":
        data = interpolate(data)
        top = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "name" not in data:
            raise ConfigError("config needs a name")
        kwargs = {}
        for key, value in data.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"[{key}] must be a table")
                kwargs[key] = _section(_SECTIONS[key], value, key)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg._base_dir = str(Path(base_dir).resolve()) if base_dir else None
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)

    def replace(self, **changes) -> "ExperimentConfig":
        out = dataclasses.replace(self, **changes)
        out._base_dir = getattr(self, "_base_dir", None)
        return out

    # resolution

    def resolve(self) -> "ExperimentConfig":
        """Fill every default and make paths absolute; idempotent."""
        base = Path(getattr(self, "_base_dir", None) or os.getcwd())

        def absolute(p: str | None) -> str | None:
            if p is None or p == "":
                return p
            return str((base / os.path.expanduser(p)).resolve())

        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        ds = dataclasses.replace(self.dataset)
        if ds.name not in DATASETS:
            raise ConfigError(f"dataset.name must be one of {DATASETS}, got {ds.name!r}")
        ds.root = absolute(ds.root) or ""
        ds.eval_split = ds.eval_split or ds.split
        if ds.image_size < 8:
            raise ConfigError("dataset.image_size must be >= 8")

        b = dataclasses.replace(self.builder)
        try:
            strategy = Strategy(b.strategy)
        except ValueError:
            raise ConfigError(f"unknown builder.strategy {b.strategy!r}; known: {[s.value for s in Strategy]}") from None
        if b.vocab and ("/" in b.vocab or b.vocab.endswith(".txt")):
            b.vocab = absolute(b.vocab)
        if strategy in (Strategy.Caption, Strategy.NounsOnly):
            from ..captions import cache_filename

            b.cache = absolute(b.cache) if b.cache else str(Path(ds.root) / cache_filename(ds.name, "Caption", b.min_tokens))
        else:
            b.cache = absolute(b.cache)
        if not (0 < b.precision <= 1 and 0 < b.recall <= 1):
            raise ConfigError("builder.precision and builder.recall must be in (0, 1]")

        m = dataclasses.replace(self.modifier)
        try:
            kind = ModifierKind(m.kind)
        except ValueError:
            raise ConfigError(f"unknown modifier.kind {m.kind!r}") from None
        if kind is not ModifierKind.Null and not m.domain:
            raise ConfigError(f"modifier.kind={m.kind} needs modifier.domain")
        m.token_file, m.checkpoint, m.image_set = absolute(m.token_file), absolute(m.checkpoint), absolute(m.image_set)

        s = dataclasses.replace(self.schedule, overrides=dict(self.schedule.overrides), scales=list(self.schedule.scales))
        if s.name not in SCHEDULES:
            raise ConfigError(f"unknown schedule {s.name!r}; known: {sorted(SCHEDULES)}")
        try:
            get_schedule(s.name, **s.overrides)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"schedule overrides: {exc}") from None

        bb = dataclasses.replace(self.backbone)
        kind_, _, arg = bb.spec.partition(":")
        if kind_ == "real":
            bb.spec = f"real:{absolute(arg)}"
        elif kind_ != "stub":
            raise ConfigError(f"backbone.spec must be stub:<seed> or real:<path>, got {bb.spec!r}")

        out = ExperimentConfig(
            name=self.name,
            task=self.task,
            seed=int(self.seed),
            output=absolute(self.output),
            fixture_dir=absolute(self.fixture_dir),
            dataset=ds,
            builder=b,
            modifier=m,
            schedule=s,
            backbone=bb,
            head=dataclasses.replace(self.head),
        )
        out._base_dir = str(base)
        return out

    # serialisation

    def to_dict(self) -> dict:
        return _drop_none(dataclasses.asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    @property
    def run_dir(self) -> Path:
        return Path(self.output) / "runs" / self.name

    def get_schedule(self):
        return get_schedule(self.schedule.name, **self.schedule.overrides)


def _section(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def _drop_none(value):
    if isinstance(value, dict):
        return {k: _drop_none(v) for k, v in value.items() if v is not None}
    if isinstance(value, list):
        return [_drop_none(v) for v in value]
    return value


_ENV_RE = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate(value, environ=None):
    """Replace ``${VAR}`` and ``${VAR:-default}`` in every string of a nested structure."""
    environ = os.environ if environ is None else environ
    if isinstance(value, dict):
        return {k: interpolate(v, environ) for k, v in value.items()}
    if isinstance(value, list):
        return [interpolate(v, environ) for v in value]
    if not isinstance(value, str):
        return value

    def sub(m):
        name, default = m.group(1), m.group(2)
        if name in environ:
            return environ[name]
        if default is not None:
            return default
        raise ConfigError(f"environment variable {name} is not set")

    return _ENV_RE.sub(sub, value)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    """Load, apply CLI overrides (seed, output, backbone, fixture_dir) and resolve."""
    cfg = ExperimentConfig.load(path)
    if overrides.get("seed") is not None:
        cfg = cfg.replace(seed=overrides["seed"])
    if overrides.get("output") is not None:
        cfg = cfg.replace(output=str(Path(overrides["output"]).resolve()))
    if overrides.get("fixture_dir") is not None:
        cfg = cfg.replace(fixture_dir=str(Path(overrides["fixture_dir"]).resolve()))
    if overrides.get("backbone") is not None:
        spec = overrides["backbone"]
        kind, _, arg = spec.partition(":")
        if kind == "real" and arg:
            # a command-line path is relative to the shell, not the config file
            spec = f"real:{Path(arg).expanduser().resolve()}"
        cfg = cfg.replace(backbone=dataclasses.replace(cfg.backbone, spec=spec))
    return cfg.resolve()
