"""Run configuration: flat ``key=value`` files with command-line overrides."""

import dataclasses
import typing
from dataclasses import dataclass
from typing import Optional

from .model import VARIANTS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    kg: Optional[str] = None
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    report: Optional[str] = None
    metrics_log: Optional[str] = None
    variant: str = "intersect"
    dim: int = 32
    max_hops: int = 2
    shards: int = 1
    batch_size: int = 4
    grad_accum: int = 32
    steps: int = 40000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eps: float = 1e-6
    eval_every: int = 100
    split: str = "test"
    workers: int = 1

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("dim", "max_hops", "shards", "batch_size", "grad_accum", "eval_every", "workers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 < self.eps < 0.5:
            raise ConfigError(f"eps must lie in (0, 0.5), got {self.eps}")
        return self

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def field_types() -> dict[str, type]:
    hints = typing.get_type_hints(RunConfig)
    out = {}
    for f in dataclasses.fields(RunConfig):
        t = hints[f.name]
        args = [a for a in typing.get_args(t) if a is not type(None)]
        out[f.name] = args[0] if args else t
    return out


def coerce(name: str, raw: str):
    types = field_types()
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    try:
        return types[name](raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        try:
            values[key] = coerce(key, raw)
        except ConfigError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return values


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                values = parse_config_text(f.read(), path)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.as_dict().items() if v is not None)
