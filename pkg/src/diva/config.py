"""Experiment configuration: defaults, key=value file format, overrides.

The config file is flat UTF-8 ``key = value`` lines with ``#`` comments.
Every field defaults to the rotated-MNIST protocol. Unknown keys are
rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys or malformed values."""


@dataclass
class ExperimentConfig:
    # data
    mnist_dir: str = "data/mnist"
    scenario_dir: str = ""  # prepared scenario location; empty = build in memory
    per_class: int = 100
    test_domain: int = 0
    scenario_mode: str = "none"  # none | factor | extra_domain
    unlabeled_factor: int = 1  # for scenario_mode=factor
    extra_domain: int = -1  # for scenario_mode=extra_domain
    # model
    arch: str = "conv"  # conv | mlp (mlp is the tiny verification architecture)
    image_size: int = 28
    dim_zd: int = 64
    dim_zx: int = 64
    dim_zy: int = 64
    # scales the convolutional channel counts of the encoders and decoder
    # (1.0 = reference architecture); < 1 gives the cheap desk profile for
    # slow machines
    width_scale: float = 1.0
    num_classes: int = 10
    num_domains: int = 5
    # objective
    objective: str = "diva"  # diva | ss_diva | vae_ablation
    beta_max: float = 1.0
    warmup_epochs: int = 100
    alpha_d: float = 2000.0
    gamma: float = 3500.0
    # optimization
    max_epochs: int = 500
    patience: int = 100
    batch_size: int = 100
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    restore_best: bool = False  # keep parameters at the best class-loss epoch
    # bookkeeping
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ConfigError("patience must be <= max_epochs")
        if self.scenario_mode not in ("none", "factor", "extra_domain"):
            raise ConfigError(f"unknown scenario_mode {self.scenario_mode!r}")
        if self.objective not in ("diva", "ss_diva", "vae_ablation"):
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.arch not in ("conv", "mlp"):
            raise ConfigError(f"unknown arch {self.arch!r}")

    @property
    def latent_dims(self) -> tuple[int, int, int]:
        return (self.dim_zd, self.dim_zx, self.dim_zy)

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float):
                value = repr(value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(fields[key].type, key, value)
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _parse_value(type_name: str, key: str, value: str):
    if type_name == "int":
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"key {key!r}: expected integer, got {value!r}") from None
    if type_name == "float":
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"key {key!r}: expected number, got {value!r}") from None
    if type_name == "bool":
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected true/false, got {value!r}")
    return value
