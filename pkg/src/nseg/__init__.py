"""Nested U-Net (UNet++) segmentation in plain numpy.

Manual forward/backward kernels, a prunable nested U-Net with deep
supervision, a PGM data pipeline with rotation augmentation, an Adam
training loop with plateau scheduling and early stopping, and a K-fold
evaluation harness.
"""
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .data import Dataset, Sample, augment_dataset, load_dataset, save_dataset, synth_generate
from .errors import (
    ConfigurationError, ContractError, LeakageError, LoadError, NsegError, NumericalError,
)
from .evaluation import cross_validate, holdout_evaluate, k_sweep, kfold_split
from .metrics import dice_coefficient, pixel_accuracy
from .network import (
    GraphConfig, NestedUNet, NodeId, backward, build_graph, forward, node_inputs, param_count,
    predict, prune,
)
from .training import TrainConfig, fit

__version__ = "0.1.0"
