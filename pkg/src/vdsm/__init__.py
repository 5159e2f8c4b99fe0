"""Video disentanglement with a static/dynamic latent split and a mixture-of-experts decoder."""
from .config import ConfigError, RunConfig, TrainConfig
from .schedules import AnnealState, ScheduleConfig

__version__ = "0.1.0"

__all__ = ["AnnealState", "ConfigError", "RunConfig", "ScheduleConfig", "TrainConfig", "__version__"]
