"""Spatio-temporal traffic forecasting with attention and a selective state-space scan."""

from .model import ModelConfig, ModelParams, count_params, forward, predict
from .data import TrafficDataset, generate_synthetic, load_csv, make_windows, save_csv
from .train import TrainConfig, evaluate

__all__ = ["ModelConfig", "ModelParams", "count_params", "forward", "predict",
           "TrafficDataset", "generate_synthetic", "load_csv", "make_windows", "save_csv",
           "TrainConfig", "evaluate"]
__version__ = "0.1.0"
