"""Minimal numpy CNN engine: forward/backward, SGD, accounting, storage."""

from .container import load_model, save_model
from .engine import backward, forward, run, softmax_cross_entropy
from .spec import INPUT, LayerSpec, NetworkSpec, OptimizerConfig
from .stats import model_stats
from .train import SGD, evaluate, predict, train_epoch
from .zoo import build, resnet50, resnet_bottleneck, small_cnn, vgg16

__all__ = [
    "INPUT", "LayerSpec", "NetworkSpec", "OptimizerConfig", "SGD",
    "backward", "build", "evaluate", "forward", "load_model", "model_stats", "predict",
    "resnet50", "resnet_bottleneck", "run", "save_model", "small_cnn", "softmax_cross_entropy",
    "train_epoch", "vgg16",
]
