"""
config.py - INI configuration for every pipeline stage

Precedence: dataclass defaults < config file < overrides. Sections map
one-to-one onto dataclasses; unknown sections and keys are errors.

    [run]      seed, out, workers, precision
    [data]     dataset location and generation settings
    [sim]      simulator tolerances       (sim.SimConfig)
    [encoder]  SAVi / holistic encoder    (savi.SaviConfig)
    [policy]   trunk and GMM head         (policy.PolicyConfig)
    [train]    optimisation schedule
    [eval]     evaluation protocol
"""

import configparser
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import ConfigError
from .policy import SAMPLE_MODES, PolicyConfig
from .savi import SaviConfig
from .sim import LEVELS, PRESETS, TASKS, SimConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

TRAIN_PHASES = ("pretrain", "bc")
PHASE_DEFAULTS = {"pretrain": {"steps": 30000, "batch_size": 16},
                  "bc": {"steps": 20000, "batch_size": 64}}


def split_list(text: str) -> List[str]:
    return [item.strip() for item in str(text).split(",") if item.strip()]


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/latest"
    workers: int = 0
    precision: str = ""

    def validate(self) -> "RunConfig":
        if self.precision not in ("", "f32", "f64"):
            raise ConfigError(f"run.precision: expected f32 or f64, got '{self.precision}'")
        if self.seed < 0:
            raise ConfigError(f"run.seed: must be non-negative, got {self.seed}")
        return self


@dataclass
class DataConfig:
    dataset: str = "data"
    task: str = "push"
    level: str = "none"
    episodes: int = 2000
    shard_episodes: int = 250
    split_ratio: float = 0.9
    preset: str = "full"
    jitter: float = 0.0

    @property
    def tasks(self) -> List[str]:
        return split_list(self.task)

    def validate(self) -> "DataConfig":
        for task in self.tasks:
            if task not in TASKS:
                raise ConfigError(f"data.task: unknown task '{task}' (expected {', '.join(TASKS)})")
        if self.level not in LEVELS:
            raise ConfigError(f"data.level: unknown level '{self.level}'")
        if self.preset not in PRESETS:
            raise ConfigError(f"data.preset: unknown preset '{self.preset}'")
        if not 0.0 < self.split_ratio <= 1.0:
            raise ConfigError(f"data.split_ratio: must be in (0, 1], got {self.split_ratio}")
        if self.episodes <= 0 or self.shard_episodes <= 0:
            raise ConfigError("data.episodes and data.shard_episodes must be positive")
        return self


@dataclass
class TrainConfig:
    """Optimisation schedule; steps and batch_size of 0 take the phase default."""
    phase: str = "pretrain"
    steps: int = 0
    batch_size: int = 0
    lr: float = 4e-4
    warmup: int = 1000
    checkpoint_every: int = 1000
    log_every: int = 50
    encoder_checkpoint: Optional[str] = None
    resume: Optional[str] = None
    pooled: bool = False
    prefetch: bool = True
    val_batches: int = 4

    def resolved(self) -> "TrainConfig":
        if self.phase not in TRAIN_PHASES:
            raise ConfigError(f"train.phase: expected one of {TRAIN_PHASES}, got '{self.phase}'")
        defaults = PHASE_DEFAULTS[self.phase]
        return dataclasses.replace(self, steps=self.steps or defaults["steps"],
                                   batch_size=self.batch_size or defaults["batch_size"])

    def validate(self) -> "TrainConfig":
        cfg = self.resolved()
        if cfg.phase == "bc" and not cfg.encoder_checkpoint:
            raise ConfigError("train.encoder_checkpoint is required for the bc phase (--encoder-checkpoint)")
        if cfg.lr <= 0:
            raise ConfigError(f"train.lr: must be positive, got {cfg.lr}")
        if cfg.log_every <= 0:
            raise ConfigError(f"train.log_every: must be positive, got {cfg.log_every}")
        return self


@dataclass
class EvalConfig:
    policy_checkpoint: str = ""
    task: str = "push"
    levels: str = "none"
    n: int = 100
    repeats: int = 3
    seed_base: int = 100000
    mode: str = "deterministic"
    frames: str = "0,10,20"

    @property
    def checkpoints(self) -> List[str]:
        return split_list(self.policy_checkpoint)

    @property
    def level_list(self) -> List[str]:
        return list(LEVELS) if self.levels.strip() == "all" else split_list(self.levels)

    @property
    def frame_list(self) -> List[int]:
        return [int(f) for f in split_list(self.frames)]

    def validate(self) -> "EvalConfig":
        if self.task not in TASKS:
            raise ConfigError(f"eval.task: unknown task '{self.task}'")
        for level in self.level_list:
            if level not in LEVELS:
                raise ConfigError(f"eval.levels: unknown level '{level}'")
        if self.mode not in SAMPLE_MODES:
            raise ConfigError(f"eval.mode: expected one of {SAMPLE_MODES}, got '{self.mode}'")
        if self.n <= 0 or self.repeats <= 0:
            raise ConfigError("eval.n and eval.repeats must be positive")
        return self


@dataclass
class Config:
    """Fully resolved configuration of one run."""
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    encoder: SaviConfig = field(default_factory=SaviConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "Config":
        for f in fields(self):
            section = getattr(self, f.name)
            try:
                section.validate()
            except ValueError as e:
                if isinstance(e, ConfigError):
                    raise
                raise ConfigError(f"{f.name}: {e}") from e
        return self


SECTIONS = tuple(f.name for f in fields(Config))


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_value(text: str, default, where: str):
    """Coerce ``text`` to the type of the field's default value."""
    text = text.strip()
    try:
        if isinstance(default, bool):
            states = configparser.ConfigParser.BOOLEAN_STATES
            if text.lower() not in states:
                raise ValueError(f"not a boolean: '{text}'")
            return states[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in split_list(text))
        if default is None:
            return text or None
        return text
    except ValueError as e:
        raise ConfigError(f"{where}: invalid value '{text}': {e}") from e


def _field_defaults(section_obj) -> Dict[str, object]:
    return {f.name: getattr(type(section_obj)(), f.name) for f in fields(section_obj)}


def set_value(config: Config, section: str, key: str, text: str) -> None:
    """Apply one ``section.key = text`` assignment."""
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section '{section}' (in '{section}.{key}')")
    obj = getattr(config, section)
    defaults = _field_defaults(obj)
    if key not in defaults:
        raise ConfigError(f"unknown config key '{section}.{key}'")
    setattr(obj, key, parse_value(text, defaults[key], f"{section}.{key}"))


def parse_override(item: str) -> Tuple[str, str, str]:
    """'section.key=value' -> (section, key, value)."""
    lhs, sep, value = item.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"override '{item}': expected section.key=value")
    return section, key, value


def load_config(path: Optional[PathLike] = None, overrides: Sequence[str] = ()) -> Config:
    """
    Resolve a Config from defaults, an optional INI file and overrides.

    Args:
        path: INI file (``[section]`` headers, ``key = value`` lines)
        overrides: ``section.key=value`` strings applied last

    Raises:
        ConfigError: unreadable file, unknown section/key or bad value
    """
    config = Config()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as f:
                parser.read_file(f)
        except (OSError, configparser.Error) as e:
            raise ConfigError(f"{path}: cannot read config: {e}") from e
        for section in parser.sections():
            for key, value in parser.items(section):
                set_value(config, section, key, value)
        logger.debug("Loaded config file %s", path)
    for item in overrides:
        set_value(config, *parse_override(item))
    return config


def to_ini(config: Config) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        obj = getattr(config, section)
        parser[section] = {f.name: format_value(getattr(obj, f.name)) for f in fields(obj)}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser[section].items())
        lines.append("")
    return "\n".join(lines)


def to_dict(config: Config) -> Dict[str, Dict[str, object]]:
    return {section: dataclasses.asdict(getattr(config, section)) for section in SECTIONS}


def flatten(prefix: str, obj) -> Dict[str, str]:
    """Dataclass fields as ``prefix.key -> text`` (checkpoint metadata echo)."""
    return {f"{prefix}.{f.name}": format_value(getattr(obj, f.name)) for f in fields(obj)}


def restore(cls, prefix: str, values: Mapping[str, str]):
    """Inverse of ``flatten``; keys missing from ``values`` keep their defaults."""
    obj = cls()
    defaults = _field_defaults(obj)
    for name, default in defaults.items():
        key = f"{prefix}.{name}"
        if key in values:
            setattr(obj, name, parse_value(values[key], default, key))
    return obj


def write_run_manifest(config: Config, subcommand: str, argv: Sequence[str], version: str) -> Path:
    """Write ``resolved.cfg`` and ``run.json`` under the run's output directory."""
    out = Path(config.run.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(to_ini(config))
    manifest = {"subcommand": subcommand, "argv": list(argv), "seed": config.run.seed,
                "version": version, "config": to_dict(config)}
    path = out / "run.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")
    return path


def describe_keys() -> str:
    """Every config key with its default, one per line (``--help`` epilog)."""
    lines = ["configuration keys (section.key = default):"]
    defaults = Config()
    for section in SECTIONS:
        obj = getattr(defaults, section)
        for f in fields(obj):
            lines.append(f"  {section}.{f.name} = {format_value(getattr(obj, f.name))}")
    return "\n".join(lines)
