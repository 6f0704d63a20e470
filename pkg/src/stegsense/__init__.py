"""Constrained-filter CNN steganalysis on a small numpy autodiff engine."""

from .config import PRESETS, RunConfig, ablation_variants, load_config, parse_config
from .network import ConfigError, NetworkConfig, forward, init_model
from .tensor import Tensor

__all__ = [
    "PRESETS", "ConfigError", "NetworkConfig", "RunConfig", "Tensor", "ablation_variants", "forward",
    "init_model", "load_config", "parse_config",
]

__version__ = "0.1.0"
