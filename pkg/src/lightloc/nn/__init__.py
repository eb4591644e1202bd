"""Minimal float64 layer toolkit: conv1d, batchnorm, relu, maxpool, fc, dropout."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import LayerSpec, Sequential, ShapeError
from .losses import PairLabel, contrastive_loss, discriminator_objective, mse
from .optim import Adam, OptimState
