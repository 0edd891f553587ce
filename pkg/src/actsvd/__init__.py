"""Activation-SVD compression of toy models.

Learns per-layer truncation positions through a differentiable spectral
mask, updates weights from truncated activations with incremental PCA, and
stores the rank-k factors in ``k·max(m, n)`` mixed-precision slots.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .autodiff import BackwardConfig, GradCheckReport, NumericalError, UpstreamGrads, grad_check, svd_backward
from .linalg import SvdError, SvdFactors, svd_full, svd_lowrank, truncate
from .models import Dataset, LayerSpec, ToyModel, forward, make_dataset, make_toy_model, task_loss
from .packing import PackedWeight, QuantBlock, pack, packed_ratio, quantize_block, unpack
from .ranks import CompressionTarget, RankAllocation, SmoothTruncation, TrainHyper, round_ranks, train_ranks
from .update import IpcaState, UpdatedWeight, update_all_weights

__all__ = [
    "BackwardConfig",
    "CompressionTarget",
    "Dataset",
    "GradCheckReport",
    "IpcaState",
    "LayerSpec",
    "NumericalError",
    "PackedWeight",
    "QuantBlock",
    "RankAllocation",
    "SmoothTruncation",
    "SvdError",
    "SvdFactors",
    "ToyModel",
    "TrainHyper",
    "UpdatedWeight",
    "UpstreamGrads",
    "forward",
    "grad_check",
    "make_dataset",
    "make_toy_model",
    "pack",
    "packed_ratio",
    "quantize_block",
    "round_ranks",
    "svd_backward",
    "svd_full",
    "svd_lowrank",
    "task_loss",
    "train_ranks",
    "truncate",
    "unpack",
    "update_all_weights",
]
