"""3D convolutional-capsule segmentation network on a small numpy autodiff engine."""

from .model import (
    ModelConfig,
    Network,
    build_conv_baseline,
    build_convcaps,
    count_params,
    forward,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "Network",
    "build_conv_baseline",
    "build_convcaps",
    "count_params",
    "forward",
    "load_checkpoint",
    "save_checkpoint",
]
