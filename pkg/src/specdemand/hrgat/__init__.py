"""Hierarchical graph attention regressor and its baselines."""
from .estimators import MODEL_NAMES, FitResult, fit_predict, restore
from .model import (
    HrGatConfig,
    ModelGraph,
    Prediction,
    backward,
    forward,
    init_params,
    load_checkpoint,
    loss,
    prepare,
    save_checkpoint,
    train,
    write_trace_csv,
)

__all__ = [
    "MODEL_NAMES", "FitResult", "fit_predict", "restore",
    "HrGatConfig", "ModelGraph", "Prediction", "backward", "forward", "init_params", "load_checkpoint",
    "loss", "prepare", "save_checkpoint", "train", "write_trace_csv",
]
