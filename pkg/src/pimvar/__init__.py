"""Deviation-robust quantized training for analog in-memory compute.

Train quantized networks that tolerate per-cell and per-chip conductance
deviations, evaluate them over Monte Carlo chip populations, and correct
deployed outputs with on-chip tuning measurements.
"""

from .autograd import Tensor, backward
from .dataio import (
    Checkpoint,
    Dataset,
    checkpoint_from_model,
    load_checkpoint,
    load_cifar10,
    load_mnist,
    save_checkpoint,
    synthetic_dataset,
)
from .evaluation import EvalConfig, EvalReport, bias_demo, evaluate, run_scenario1, run_scenario2
from .gradcheck import check_gradients
from .network import (
    Model,
    NetworkSpec,
    build_lenet5,
    build_smallconvnet,
    build_tinynet,
    forward,
    init_model,
    refresh_stats,
)
from .quantization import QuantConfig, calibrate_activations, mmse_scale, quantize
from .selftuning import NonRecoverableChipError, STConfig, gtm_measure, overhead, prepare_st
from .training import TrainConfig, TrainingDivergedError, ptq, train, train_qat, train_qavat, train_vat
from .variability import (
    MODEL_LAYER_FIXED,
    MODEL_WEIGHT_PROPORTIONAL,
    ChipInstance,
    VariabilityConfig,
    sample_chip,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "Checkpoint",
    "Dataset",
    "checkpoint_from_model",
    "load_checkpoint",
    "load_cifar10",
    "load_mnist",
    "save_checkpoint",
    "synthetic_dataset",
    "EvalConfig",
    "EvalReport",
    "bias_demo",
    "evaluate",
    "run_scenario1",
    "run_scenario2",
    "check_gradients",
    "Model",
    "NetworkSpec",
    "build_lenet5",
    "build_smallconvnet",
    "build_tinynet",
    "forward",
    "init_model",
    "refresh_stats",
    "QuantConfig",
    "calibrate_activations",
    "mmse_scale",
    "quantize",
    "NonRecoverableChipError",
    "STConfig",
    "gtm_measure",
    "overhead",
    "prepare_st",
    "TrainConfig",
    "TrainingDivergedError",
    "ptq",
    "train",
    "train_qat",
    "train_qavat",
    "train_vat",
    "ChipInstance",
    "MODEL_LAYER_FIXED",
    "MODEL_WEIGHT_PROPORTIONAL",
    "VariabilityConfig",
    "sample_chip",
]
