"""Experiment configuration: a flat ``section.key = value`` text format.

Example::

    # comments start with '#'
    seed = 42
    env.reward_scale = 0.02
    reward_train.epochs = 20
    experiment.methods = Mean, Mode, GE_IRCR, GE_RUDDER, GE_RRD:8, GE_RRD:16, LI_ONLY, GELI_RRD_VA
    paths.workdir = runs/default

Every key must name a field of one of the sections below; unknown keys are
errors so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .losses import GeliConfig
from .policy import PPOConfig
from .synth import EnvConfig
from .training import MethodSpec, RewardTrainConfig

DEFAULT_METHODS = ("Mean", "Mode", "GE_IRCR", "GE_RUDDER", "GE_RRD:8", "GE_RRD:16",
                   "LI_ONLY", "GELI_RRD_VA")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    train: int = 500
    test: int = 50
    policy: int = 600


@dataclass(frozen=True)
class AdaptConfig:
    reward_method: str = "GELI_RRD_VA"
    updates: int = 200
    vocab_size: int = 8
    eval_episodes: int = 200
    eval_seed_offset: int = 1000


@dataclass(frozen=True)
class ExperimentSection:
    methods: tuple[str, ...] = DEFAULT_METHODS


@dataclass(frozen=True)
class PathsConfig:
    workdir: str = ""
    dataset: str = "dataset.jsonl"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


# EnvConfig/GeliConfig/PPOConfig carry their own seed fields; they are driven by the top-level seed
_SEEDED = {"env": "seed", "geli": "rng_seed", "ppo": "seed"}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 42
    env: EnvConfig = field(default_factory=lambda: EnvConfig(
        num_trajectories=1150, reward_scale=0.02, return_noise_sigma=0.1))
    geli: GeliConfig = field(default_factory=lambda: GeliConfig(lam=0.1))
    reward_train: RewardTrainConfig = field(default_factory=lambda: RewardTrainConfig(lr=1e-4))
    ppo: PPOConfig = field(default_factory=lambda: PPOConfig(lr=0.005))
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        for section, key in _SEEDED.items():
            sub = getattr(self, section)
            if getattr(sub, key) != self.seed:
                object.__setattr__(self, section, dataclasses.replace(sub, **{key: self.seed}))
        n = self.split.train + self.split.test + self.split.policy
        if self.env.num_trajectories != n:
            raise ConfigError(f"env.num_trajectories={self.env.num_trajectories} must equal "
                              f"split.train + split.test + split.policy = {n}")
        for m in self.experiment.methods:
            try:
                MethodSpec.parse(m)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        try:
            self.env.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def method_specs(self) -> list[MethodSpec]:
        return [MethodSpec.parse(m) for m in self.experiment.methods]

    @property
    def split_fractions(self) -> tuple[float, float, float]:
        n = self.env.num_trajectories
        return (self.split.train / n, self.split.test / n, self.split.policy / n)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed)

    def resolve_workdir(self) -> Path:
        wd = self.paths.workdir or os.environ.get("GELI_WORKDIR", "")
        if not wd:
            raise ConfigError("no workdir: set paths.workdir or GELI_WORKDIR")
        return Path(wd)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for f in dataclasses.fields(self):
            if f.name == "seed":
                continue
            sub = getattr(self, f.name)
            for sf in dataclasses.fields(sub):
                if _SEEDED.get(f.name) == sf.name:
                    continue
                lines.append(f"{f.name}.{sf.name} = {_format(getattr(sub, sf.name))}")
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _coerce(raw: str, annotation, key: str):
    raw = raw.strip()
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if annotation is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
        if annotation is str:
            return raw
        if origin is tuple:
            items = [x.strip() for x in raw.split(",") if x.strip()]
            return tuple(_coerce(x, args[0], key) for x in items)
        if origin in (typing.Union, types.UnionType):
            if raw.lower() in ("none", "null", ""):
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _coerce(raw, inner, key)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {annotation}") from exc
    raise ConfigError(f"{key}: unsupported field type {annotation}")


def _section_types(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    top_hints = _section_types(ExperimentConfig)
    values: dict[str, dict] = {}
    seed = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key == "seed":
            seed = _coerce(raw, int, key)
            continue
        section, _, name = key.partition(".")
        if section not in top_hints or section == "seed" or not name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        hints = _section_types(top_hints[section])
        if name not in hints or _SEEDED.get(section) == name:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values.setdefault(section, {})[name] = _coerce(raw, hints[name], key)

    base = ExperimentConfig()
    kwargs = {}
    for section, fields_ in values.items():
        try:
            kwargs[section] = dataclasses.replace(getattr(base, section), **fields_)
        except ValueError as exc:
            raise ConfigError(f"{source}: [{section}] {exc}") from exc
    if seed is not None:
        kwargs["seed"] = seed
    try:
        return dataclasses.replace(base, **kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, str(path))
