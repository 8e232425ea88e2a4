"""A small numpy CNN engine: layers, Adam, training, model files, gradient checks."""

from .gradcheck import grad_check, tiny_archs
from .layers import ShapeError
from .network import PILOTNET, Arch, CnnModel, Network, cross_entropy_loss, softmax
from .optim import AdamState, adam_step
from .serialize import ModelFileError, load_matching, load_model, save_model
from .train import TrainConfig, block_mean, load_patch_tensors, predict_cnn, predict_proba, preprocess_patch, train_cnn

__all__ = [
    "PILOTNET", "Arch", "AdamState", "CnnModel", "ModelFileError", "Network", "ShapeError", "TrainConfig",
    "adam_step", "block_mean", "cross_entropy_loss", "grad_check", "load_matching", "load_model",
    "load_patch_tensors", "predict_cnn", "predict_proba", "preprocess_patch", "save_model", "softmax",
    "tiny_archs", "train_cnn",
]
