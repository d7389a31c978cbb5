"""Training loop, evaluation, checkpoints and ablation runs."""

from kprn.trainkit.ablation import AblationRow, expand_grid, format_table, run_ablation
from kprn.trainkit.checkpoint import load_checkpoint, save_checkpoint
from kprn.trainkit.config import TrainConfig, load_config, lr_at, parse_key_values
from kprn.trainkit.evaluate import EvalResult, evaluate
from kprn.trainkit.train import (
    METRICS_HEADER,
    PreparedScene,
    TrainResult,
    build_model,
    prepare_scenes,
    train_loop,
    train_step,
)

__all__ = [
    "AblationRow",
    "EvalResult",
    "METRICS_HEADER",
    "PreparedScene",
    "TrainConfig",
    "TrainResult",
    "build_model",
    "evaluate",
    "expand_grid",
    "format_table",
    "load_checkpoint",
    "load_config",
    "lr_at",
    "parse_key_values",
    "prepare_scenes",
    "run_ablation",
    "save_checkpoint",
    "train_loop",
    "train_step",
]
