"""CTNet image denoiser on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .config import ModelConfig, NoiseSpec, RunConfig, TrainConfig  # noqa: E402
from .model import ctnet_forward, init_params, trace_names, zero_params  # noqa: E402

__all__ = [
    "ModelConfig",
    "NoiseSpec",
    "RunConfig",
    "TrainConfig",
    "ctnet_forward",
    "init_params",
    "trace_names",
    "zero_params",
]
