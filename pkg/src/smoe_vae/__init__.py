"""Sparse mixture-of-experts VAE: training and expert-specialization analysis in numpy."""
from .losses import LossBreakdown, LossConfig, total_loss
from .model import ModelConfig, SmoeVae, init, route_supervised
from .training import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
