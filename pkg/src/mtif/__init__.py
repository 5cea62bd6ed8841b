"""Multitask influence scores for soft-parameter-sharing models."""

from .data import MtlDataset, SyntheticConfig, TaskData, generate_synthetic
from .influence import InfluenceMatrix, MultitaskInfluence, TaskAffinity, mtif_all, mtif_instance, mtif_task
from .linalg import BlockFactorization, BlockHessian, block_inverse, schur_complement
from .models import ModelSpec, MtlParams
from .trainer import FitResult, SolverConfig, fit, fit_task_weighted

__all__ = [
    "BlockFactorization",
    "BlockHessian",
    "FitResult",
    "InfluenceMatrix",
    "ModelSpec",
    "MtlDataset",
    "MtlParams",
    "MultitaskInfluence",
    "SolverConfig",
    "SyntheticConfig",
    "TaskAffinity",
    "TaskData",
    "block_inverse",
    "fit",
    "fit_task_weighted",
    "generate_synthetic",
    "mtif_all",
    "mtif_instance",
    "mtif_task",
    "schur_complement",
]

__version__ = "0.1.0"
