"""Re-weighted counterfactual regression with numpy."""
from .data import CateDataset, SourceSample, TargetSample
from .ipm import KernelConfig, weighted_mmd2
from .model import NumericalError, RcfrModel, TrainConfig, compute_weights, estimate_cate, fit, predict

__all__ = [
    "CateDataset", "SourceSample", "TargetSample", "KernelConfig", "weighted_mmd2",
    "NumericalError", "RcfrModel", "TrainConfig", "compute_weights", "estimate_cate", "fit", "predict",
]
