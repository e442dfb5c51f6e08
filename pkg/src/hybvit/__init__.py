"""Single vision-transformer denoising diffusion model with a hybrid classifier head.

numpy-only: a small reverse-mode autodiff, noise schedules and the variational
bound, the shared ViT backbone, training, ancestral sampling and evaluation
(calibration, OOD detection, PGD robustness, bits/dim).
"""

from .autodiff import ContractError, NumericError, ShapeError, Tape, Tensor, backward, grad
from .checkpoint import (Checkpoint, CheckpointError, checkpoint_from_model, checkpoint_from_state,
                         load_checkpoint, model_from_checkpoint, save_checkpoint, state_from_checkpoint)
from .config import UsageError
from .data import DataFormatError, Dataset, load_cifar_binary, make_interpolation, make_synthetic
from .diffusion import NoiseSchedule, VlbTerms, make_schedule, q_sample, vlb_estimate, vlb_terms
from .evaluation import EvalConfig, EvalReport, auroc, ece, evaluate, pgd_attack
from .sampling import SampleRequest, sample
from .training import TrainConfig, TrainState, Trainer, loss_hybrid, loss_simple, new_state, train
from .vit import ViT, ViTConfig, time_embedding

__version__ = "0.1.0"

__all__ = [
    "ContractError", "NumericError", "ShapeError", "Tape", "Tensor", "backward", "grad",
    "Checkpoint", "CheckpointError", "checkpoint_from_model", "checkpoint_from_state",
    "load_checkpoint", "model_from_checkpoint", "save_checkpoint", "state_from_checkpoint",
    "UsageError", "DataFormatError", "Dataset", "load_cifar_binary", "make_interpolation",
    "make_synthetic", "NoiseSchedule", "VlbTerms", "make_schedule", "q_sample", "vlb_estimate",
    "vlb_terms", "EvalConfig", "EvalReport", "auroc", "ece", "evaluate", "pgd_attack",
    "SampleRequest", "sample", "TrainConfig", "TrainState", "Trainer", "loss_hybrid",
    "loss_simple", "new_state", "train", "ViT", "ViTConfig", "time_embedding",
]
