"""Run configuration: a TOML file of flat dotted keys plus command-line overrides.

Example::

    env.gamma_base = 0.95
    model.d = 128
    train.lr_pi = 1e-4
    experiment.k_values = [1, 5, 10, 20, 40]

Every key is checked against the known field set; any problem is reported as
a :class:`ConfigError` naming the offending dotted key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .agent import TrainConfig
from .env import LAYOUTS


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class EnvConfig:
    layout_id: str = "FourRoom13"
    gamma_base: float = 0.95
    max_steps: int = 300


@dataclass
class ModelConfig:
    d: int = 128
    hidden: int = 128
    ae_hidden: int = 128
    feature_mode: str = "onehot"


@dataclass
class ExperimentConfig:
    k: int = 20
    k_values: list = field(default_factory=lambda: [1, 5, 10, 20, 40])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    reference_mode: str = "oracle"
    reference_temperature: float = 1e-3
    transfer_steps: int = 100_000
    output_dir: str = "runs"


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def as_dict(self) -> dict:
        return {f"{sec}.{k}": v for sec in SECTIONS for k, v in dataclasses.asdict(getattr(self, sec)).items()}


SECTIONS = ("env", "model", "train", "experiment")


def _expected_type(section: str, name: str):
    cls = type(getattr(RunConfig(), section))
    for f in dataclasses.fields(cls):
        if f.name == name:
            default = f.default_factory() if f.default is dataclasses.MISSING else f.default
            return type(default)
    return None


def _coerce(key: str, kind: type, value):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list) or not value or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigError(key, f"expected a non-empty list of integers, got {value!r}")
        return list(value)
    raise ConfigError(key, "unsupported field type")


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def build_config(values: dict) -> RunConfig:
    """RunConfig from a ``{"section.field": value}`` mapping, fully validated."""
    parts = {sec: {} for sec in SECTIONS}
    for key, value in values.items():
        section, _, name = key.partition(".")
        kind = _expected_type(section, name) if section in parts and name else None
        if kind is None:
            raise ConfigError(key, "unknown configuration key")
        parts[section][name] = _coerce(key, kind, value)

    env = EnvConfig(**parts["env"])
    model = ModelConfig(**parts["model"])
    experiment = ExperimentConfig(**parts["experiment"])
    try:
        train = TrainConfig(**parts["train"])
    except ValueError as exc:
        field_name = str(exc).split()[0]
        raise ConfigError(f"train.{field_name}", str(exc)) from exc
    cfg = RunConfig(env, model, train, experiment)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    e, m, x = cfg.env, cfg.model, cfg.experiment
    if e.layout_id not in LAYOUTS:
        raise ConfigError("env.layout_id", f"unknown layout {e.layout_id!r}; known: {sorted(LAYOUTS)}")
    if not 0.0 < e.gamma_base < 1.0:
        raise ConfigError("env.gamma_base", f"must lie in (0, 1), got {e.gamma_base}")
    if e.max_steps < 1:
        raise ConfigError("env.max_steps", "must be >= 1")
    for name in ("d", "hidden", "ae_hidden"):
        if getattr(m, name) < 1:
            raise ConfigError(f"model.{name}", "must be >= 1")
    if m.feature_mode not in ("learned", "onehot"):
        raise ConfigError("model.feature_mode", "must be 'learned' or 'onehot'")
    if not 1 <= x.k <= 48:
        raise ConfigError("experiment.k", "must lie in [1, 48]")
    if any(not 1 <= k <= 48 for k in x.k_values):
        raise ConfigError("experiment.k_values", "every k must lie in [1, 48]")
    if len(set(x.seeds)) != len(x.seeds):
        raise ConfigError("experiment.seeds", "seeds must be distinct")
    if x.reference_mode not in ("oracle", "trained"):
        raise ConfigError("experiment.reference_mode", "must be 'oracle' or 'trained'")
    if x.reference_temperature < 0:
        raise ConfigError("experiment.reference_temperature", "must be >= 0")
    if x.transfer_steps < 1:
        raise ConfigError("experiment.transfer_steps", "must be >= 1")


def parse_text(text: str) -> dict:
    try:
        tree = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"not valid TOML: {exc}") from exc
    return _flatten(tree)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (optional), apply ``overrides`` and validate."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
        values.update(parse_text(text))
    values.update(overrides or {})
    return build_config(values)
