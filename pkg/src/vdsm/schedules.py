"""Per-epoch annealing of the KL weights and the mixture sharpness."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

PRETRAIN = "pretrain"
SEQUENCE = "sequence"


@dataclass(frozen=True)
class ScheduleConfig:
    pre_lambda_z_start: float = 30.0
    pre_lambda_z_end: float = 1.0
    pre_lambda_s_start: float = 0.1
    pre_lambda_s_end: float = 1.0
    seq_lambda_z_start: float = 0.1
    seq_lambda_z_end: float = 1.0
    lambda_s: float = 1.0
    lambda_d: float = 1.0
    tau_min: float = 1.0
    tau_max: float = 10.0


@dataclass(frozen=True)
class AnnealState:
    lambda_z: float
    lambda_s: float
    lambda_d: float
    tau_s: float
    epoch: int = 0
    stage: str = PRETRAIN

    def to_dict(self):
        return asdict(self)


def _progress(epoch: int, total_epochs: int) -> float:
    if total_epochs < 1 or not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    # a single-epoch stage trains directly on the end-point weights
    return 1.0 if total_epochs == 1 else epoch / (total_epochs - 1)


def _lerp(start: float, end: float, w: float) -> float:
    # weighted form keeps both endpoints exact
    return (1.0 - w) * start + w * end


def pretrain_schedule(epoch: int, total_epochs: int, config: ScheduleConfig = ScheduleConfig()) -> AnnealState:
    """Half-cosine ramps: lambda_z falls and lambda_s rises; tau_s grows linearly."""
    u = _progress(epoch, total_epochs)
    w = 0.5 * (1.0 - math.cos(math.pi * u))
    return AnnealState(
        lambda_z=_lerp(config.pre_lambda_z_start, config.pre_lambda_z_end, w),
        lambda_s=_lerp(config.pre_lambda_s_start, config.pre_lambda_s_end, w),
        lambda_d=config.lambda_d,
        tau_s=_lerp(config.tau_min, config.tau_max, u),
        epoch=epoch,
        stage=PRETRAIN,
    )


def sequence_schedule(epoch: int, total_epochs: int, config: ScheduleConfig = ScheduleConfig()) -> AnnealState:
    """Rising quadratic for lambda_z (slow start); everything else held fixed."""
    u = _progress(epoch, total_epochs)
    return AnnealState(
        lambda_z=_lerp(config.seq_lambda_z_start, config.seq_lambda_z_end, u * u),
        lambda_s=config.lambda_s,
        lambda_d=config.lambda_d,
        tau_s=config.tau_max,
        epoch=epoch,
        stage=SEQUENCE,
    )
