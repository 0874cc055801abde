"""Experiment configuration: flat dotted keys (``mixer.n_particles: 8``) in a YAML file."""

from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class EnvConfig:
    name: str = "matrix"
    payoff_file: typing.Optional[str] = None
    grid_size: int = 4
    episode_limit: int = 30
    prey_moves: bool = True


@dataclass
class AgentConfig:
    hidden_dim: int = 64


@dataclass
class EpsilonConfig:
    start: float = 1.0
    finish: float = 0.05
    anneal_steps: int = 50_000


@dataclass
class MixerConfig:
    kind: str = "mmdmix"
    embed_dim: int = 32
    n_particles: int = 8
    n_combined: int = 8
    hypernet_hidden: int = 64
    bias_hidden: int = 32


@dataclass
class RemConfig:
    enabled: bool = True


@dataclass
class KernelConfig:
    kind: str = "triangle"
    p: float = 2.0
    bandwidths: typing.List[float] = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0])


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lr: float = 0.0005
    optim_decay: float = 0.99
    optim_eps: float = 1e-5
    grad_clip: float = 10.0
    buffer_size: int = 5000
    batch_size: int = 32
    target_period: int = 200
    total_steps: int = 20_000
    eval_interval: int = 2_000
    eval_episodes: int = 32


@dataclass
class ExperimentConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    epsilon: EpsilonConfig = field(default_factory=EpsilonConfig)
    mixer: MixerConfig = field(default_factory=MixerConfig)
    rem: RemConfig = field(default_factory=RemConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> ExperimentConfig:
        from .envs import ENV_NAMES

        checks = [
            (self.env.name in ENV_NAMES, f"env.name must be one of {', '.join(ENV_NAMES)}"),
            (self.mixer.n_particles >= 1, "mixer.n_particles must be >= 1"),
            (self.mixer.n_combined >= 1, "mixer.n_combined must be >= 1"),
            (self.mixer.kind in ("vdn", "qmix", "mmdmix"), "mixer.kind must be one of vdn, qmix, mmdmix"),
            (self.mixer.embed_dim >= 1, "mixer.embed_dim must be >= 1"),
            (0.0 <= self.train.gamma <= 1.0, "train.gamma must lie in [0, 1]"),
            (self.train.lr > 0.0, "train.lr must be > 0"),
            (0.0 <= self.train.optim_decay < 1.0, "train.optim_decay must lie in [0, 1)"),
            (self.train.optim_eps > 0.0, "train.optim_eps must be > 0"),
            (self.train.batch_size >= 1, "train.batch_size must be >= 1"),
            (self.train.batch_size <= self.train.buffer_size, "train.batch_size must not exceed train.buffer_size"),
            (self.train.target_period >= 1, "train.target_period must be >= 1"),
            (self.train.total_steps >= 0, "train.total_steps must be >= 0"),
            (self.train.eval_interval >= 1, "train.eval_interval must be >= 1"),
            (self.train.eval_episodes >= 1, "train.eval_episodes must be >= 1"),
            (0.0 <= self.epsilon.finish <= 1.0 and 0.0 <= self.epsilon.start <= 1.0, "epsilon.start/finish must lie in [0, 1]"),
            (self.epsilon.anneal_steps >= 0, "epsilon.anneal_steps must be >= 0"),
            (self.agent.hidden_dim >= 1, "agent.hidden_dim must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        self.kernel_spec()  # raises on a bad kernel
        return self

    def kernel_spec(self):
        from .kernels import Kernel

        return Kernel(self.kernel.kind, float(self.kernel.p), tuple(self.kernel.bandwidths))

    def to_flat(self) -> dict:
        return flatten(dataclasses.asdict(self))

    def label(self) -> str:
        """Method name used to group runs when summarising."""
        if self.mixer.kind == "mmdmix":
            return "mmdmix+rem" if self.rem.enabled else "mmdmix"
        return self.mixer.kind


def flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value, annotation):
    origin = typing.get_origin(annotation)
    if origin is typing.Union:  # Optional[str]
        if value is None:
            return None
        return _coerce(key, value, str)
    if origin in (list, typing.List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [_coerce(key, v, float) for v in value]
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type {annotation}")


def _set(cfg: ExperimentConfig, key: str, value) -> None:
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or part not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, part)
    hints = typing.get_type_hints(type(target)) if dataclasses.is_dataclass(target) else {}
    leaf = parts[-1]
    if leaf not in hints or dataclasses.is_dataclass(getattr(target, leaf)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, leaf, _coerce(key, value, hints[leaf]))


def from_flat(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    for key, value in values.items():
        _set(cfg, key, value)
    return cfg.validate()


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    if isinstance(value, str):
        # YAML 1.1 reads "1e-3" as a string
        try:
            value = float(value)
        except ValueError:
            pass
    return key.strip(), value


def parse_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the file's keys, then ``key=value`` overrides; validated."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping of dotted keys")
        values.update(flatten(loaded))
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        values[key] = value
    return from_flat(values)
