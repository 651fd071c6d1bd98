"""Uncertain-KG embedding backbones (UKGE-logi, UKGE-rect, pseudo-labelled)."""
from .model import (
    Mapping,
    ModelParams,
    from_bytes,
    init_params,
    load_checkpoint,
    predict,
    raw_score,
    save_checkpoint,
    to_bytes,
)
from .objectives import MSE, Batch, Gradient, Pinball, SemiMSE, gradient, mse_objective, pinball_objective
from .train import SemiConfig, TrainConfig, TrainResult, fit, pseudo_label, train, train_semi

__all__ = [
    "Mapping", "ModelParams", "from_bytes", "init_params", "load_checkpoint", "predict", "raw_score",
    "save_checkpoint", "to_bytes", "MSE", "Batch", "Gradient", "Pinball", "SemiMSE", "gradient",
    "mse_objective", "pinball_objective", "SemiConfig", "TrainConfig", "TrainResult", "fit",
    "pseudo_label", "train", "train_semi",
]
