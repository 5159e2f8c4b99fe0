"""Training/run configuration and the ``key = value`` config file format.

One setting per line, ``#`` starts a comment, blank lines are ignored::

    kappa_z = 8
    frame_shape = 3, 32, 32
    tau_max = 10.0

Keys are the field names of :class:`TrainConfig`, :class:`ScheduleConfig`
and :class:`RunConfig`. Unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .schedules import ScheduleConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    frame_shape: Tuple[int, int, int] = (3, 32, 32)
    kappa_z: int = 8
    kappa_s: int = 8
    kappa_d: int = 16
    n_experts: int = 8
    enc_channels: Tuple[int, ...] = (16, 16, 32, 32)
    dec_channels: Tuple[int, ...] = (32, 32, 16)
    identity_dim: int = 64
    rnn_hidden: int = 64
    rnn_layers: int = 1
    token_dim: int = 8
    trans_hidden: int = 16
    blur: bool = False
    seq_len: int = 16
    batch_size: int = 8
    batches_per_epoch: int = 0  # 0: one pass over the data
    pretrain_epochs: int = 60
    sequence_epochs: int = 40
    lr: float = 1e-3
    grad_clip: float = 10.0
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = [
            "kappa_z", "kappa_s", "kappa_d", "n_experts", "identity_dim", "rnn_hidden",
            "rnn_layers", "token_dim", "trans_hidden", "seq_len", "batch_size",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("pretrain_epochs", "sequence_epochs", "batches_per_epoch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive")
        if len(self.frame_shape) != 3 or min(self.frame_shape) <= 0:
            raise ConfigError("frame_shape must be three positive integers (C, H, W)")
        # n_experts == 1 is the single-decoder ablation
        if self.n_experts != 1 and self.n_experts != self.kappa_s:
            raise ConfigError(f"n_experts ({self.n_experts}) must equal kappa_s ({self.kappa_s})")
        sc = self.schedule
        if sc.tau_min <= 0 or sc.tau_max < sc.tau_min:
            raise ConfigError("need 0 < tau_min <= tau_max")
        lambdas = [v for f, v in dataclasses.asdict(sc).items() if "lambda" in f]
        if min(lambdas) < 0:
            raise ConfigError("KL weights must be nonnegative")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        d = dict(d)
        sched = ScheduleConfig(**d.pop("schedule", {}))
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(schedule=sched, **d)


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: Optional[str] = None
    out: str = "runs/default"
    init_checkpoint: Optional[str] = None
    threads: int = 1


def _convert(raw: str, tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:  # Optional[X]
        inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
        return None if raw.lower() in ("", "none") else _convert(raw, inner)
    if origin in (tuple, Tuple):
        elem = typing.get_args(tp)[0]
        return tuple(_convert(p.strip(), elem) for p in raw.split(",") if p.strip())
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return tp(raw)


def _field_types(cls) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def build_run_config(values: Mapping[str, Any], base: RunConfig = RunConfig()) -> RunConfig:
    """Apply ``values`` (strings from a file, or typed flag values) on top of ``base``."""
    train_types = _field_types(TrainConfig)
    sched_types = _field_types(ScheduleConfig)
    run_types = _field_types(RunConfig)
    train_kw, sched_kw, run_kw = {}, {}, {}
    for key, value in values.items():
        if key in sched_types:
            dest, tp = sched_kw, sched_types[key]
        elif key in train_types and key != "schedule":
            dest, tp = train_kw, train_types[key]
        elif key in run_types and key != "train":
            dest, tp = run_kw, run_types[key]
        else:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            dest[key] = _convert(value, tp) if isinstance(value, str) else value
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    sched = replace(base.train.schedule, **sched_kw)
    train = replace(base.train, schedule=sched, **train_kw)
    return replace(base, train=train, **run_kw)


def load_run_config(path, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a config file, then apply flag ``overrides`` (flags win)."""
    values: Dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), str(path)))
    values.update(overrides or {})
    return build_run_config(values)
