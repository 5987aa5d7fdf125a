"""Conditional normalizing flows for structured prediction.

Models p(y|x) with an invertible multi-scale flow whose layer weights are
generated from x by conditioning networks. Likelihoods are exact via the
change of variables, gradients come from the package's own reverse-mode
tape over float64 numpy arrays, and prediction is conditional sampling.
"""

from .estimator import ConditionalGlow
from .inference import PredictionConfig, predict, predict_gradient, predict_sample_mean, sample
from .model import FlowConfig, FlowModel
from .tensor import NumericsError, Parameter, Tensor, no_grad
from .training import ArrayDataset, TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "ArrayDataset",
    "ConditionalGlow",
    "FlowConfig",
    "FlowModel",
    "NumericsError",
    "Parameter",
    "PredictionConfig",
    "Tensor",
    "TrainConfig",
    "no_grad",
    "predict",
    "predict_gradient",
    "predict_sample_mean",
    "sample",
    "train_loop",
    "__version__",
]
