"""Cascaded diffusion models (noise predictor theta feeding a clean-image refiner phi)
with metric-function losses, built on a small numpy autodiff core."""

from casdm.config import ConfigError, ExperimentConfig, load_config
from casdm.model import CasDmOutput, DiffusionModel, ModelConfig, Variant
from casdm.sampler import SamplerConfig, sample
from casdm.schedule import NoiseSchedule, make_schedule

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "CasDmOutput",
    "DiffusionModel",
    "ModelConfig",
    "Variant",
    "SamplerConfig",
    "sample",
    "NoiseSchedule",
    "make_schedule",
]
