"""Transfer learning through explicit, per-sample transformation matrices."""
from .config import ExperimentConfig, parse_config
from .experiment import run_experiment
from .models import build_converter, build_model, load_checkpoint, save_checkpoint
from .pipeline import TrainPlan, coral_align, fine_tune, pretrain_converter, train_correspondence

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "parse_config", "run_experiment",
    "build_converter", "build_model", "load_checkpoint", "save_checkpoint",
    "TrainPlan", "coral_align", "fine_tune", "pretrain_converter", "train_correspondence",
]
