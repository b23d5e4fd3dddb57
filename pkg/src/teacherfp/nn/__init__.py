from .layers import (AvgPool2d, BatchNorm, Conv2d, Flatten, Layer, Linear,
                     MaxPool2d, ReLU, ShapeError, Sigmoid, Softmax,
                     layer_from_spec)
from .network import (FeatureMatchLoss, Network, cross_entropy,
                      input_gradient, train_step)
from .adam import AdamState, GradientDiverged

__all__ = [
    "AvgPool2d", "BatchNorm", "Conv2d", "Flatten", "Layer", "Linear",
    "MaxPool2d", "ReLU", "ShapeError", "Sigmoid", "Softmax", "layer_from_spec",
    "FeatureMatchLoss", "Network", "cross_entropy", "input_gradient",
    "train_step", "AdamState", "GradientDiverged",
]
