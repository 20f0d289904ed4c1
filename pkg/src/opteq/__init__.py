"""Optimization-induced equilibrium networks.

Equilibrium layers that are proximal operators of explicit convex
functions, deep compositions of them, fixed-point solvers (Picard and a
regularizer-selecting SAM iteration) and two training paths (unrolled
reverse mode and implicit adjoint).
"""

from .activations import Activation, leaky_relu, relu, sigmoid_shifted, tanh
from .deepnet import (
    DeepOptEqModel,
    Extractor,
    block_lift,
    block_system_residual,
    feedforward_as_deep_opteq,
    forward_map,
    load_checkpoint,
    predict,
    random_model,
    save_checkpoint,
    two_block_objective,
    universal_factorize,
    wide_joint_objective,
    wide_system_solve,
)
from .regularizers import Regularizer, append_structural_regularizer
from .solvers import SamSchedule, SolveReport, picard_solve, sam_solve, selection_gap
from .tensors import ConvergenceError, spectral_norm, spectral_project
from .training import (
    Batch,
    LossSpec,
    LrSchedule,
    ift_loss_and_grad,
    sgd_train,
    unrolled_loss_and_grad,
)
from .unitlayer import (
    LayerParams,
    UnitLayerConfig,
    averaged_forward,
    moreau_envelope,
    phi_closed_form,
    psi_value,
    unit_forward,
)

__version__ = "0.1.0"

__all__ = [
    "Activation", "relu", "leaky_relu", "tanh", "sigmoid_shifted",
    "DeepOptEqModel", "Extractor", "random_model", "forward_map", "predict",
    "block_lift", "block_system_residual", "wide_system_solve", "two_block_objective",
    "wide_joint_objective", "universal_factorize", "feedforward_as_deep_opteq",
    "save_checkpoint", "load_checkpoint",
    "Regularizer", "append_structural_regularizer",
    "SamSchedule", "SolveReport", "picard_solve", "sam_solve", "selection_gap",
    "ConvergenceError", "spectral_norm", "spectral_project",
    "Batch", "LossSpec", "LrSchedule", "sgd_train", "unrolled_loss_and_grad",
    "ift_loss_and_grad",
    "LayerParams", "UnitLayerConfig", "unit_forward", "averaged_forward", "psi_value",
    "phi_closed_form", "moreau_envelope",
]
