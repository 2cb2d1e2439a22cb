from .data import PhantomSpec, generate_phantom, normalize, sample_patches
from .infer import sliding_window_infer, sliding_window_probs, tile_starts
from .train import (
    Adam,
    ScheduleState,
    TrainConfig,
    TrainingError,
    compute_losses,
    fit,
    mean_foreground_dsc,
    schedule_update,
    train_step,
)
from .volio import read_labels, read_volume, write_labels, write_volume

__all__ = [
    "Adam",
    "PhantomSpec",
    "ScheduleState",
    "TrainConfig",
    "TrainingError",
    "compute_losses",
    "fit",
    "generate_phantom",
    "mean_foreground_dsc",
    "normalize",
    "read_labels",
    "read_volume",
    "sample_patches",
    "schedule_update",
    "sliding_window_infer",
    "sliding_window_probs",
    "tile_starts",
    "train_step",
    "write_labels",
    "write_volume",
]
