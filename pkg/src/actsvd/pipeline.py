"""End-to-end compression: learn ranks, round, update weights, pack, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import BackwardConfig
from .models import Dataset, ToyModel, evaluate, make_dataset, make_toy_model
from .modes import mode_loss, weight_svd_truncate
from .packing import PackedWeight, pack, unpack
from .ranks import (
    CompressionTarget,
    RankAllocation,
    TrainHyper,
    TrainResult,
    model_ratio,
    round_ranks,
    train_ranks,
)
from .update import LayerUpdateRecord, UpdatedWeight, update_all_weights

log = logging.getLogger(__name__)


def pack_model(model: ToyModel, alloc: RankAllocation) -> ToyModel:
    """Pack every allocated layer; its dense weight becomes ``w1 @ w2`` of the packed factors."""
    ks = alloc.int_ks()
    out = model.with_weights({})
    for layer in out.layers:
        if layer.name in ks:
            p = pack(UpdatedWeight(layer.weight, ks[layer.name]))
            w1, w2 = unpack(p)
            layer.weight = w1 @ w2
            layer.packed = p
    return out


def packed_layers(model: ToyModel) -> dict[str, PackedWeight]:
    return {layer.name: layer.packed for layer in model.layers if layer.packed is not None}


@dataclass
class PipelineResult:
    target: float
    alloc: RankAllocation
    ratio: float
    dense_loss: float
    updated_loss: float  # unpacked W̃ model
    packed_loss: float  # factored forward from packed weights
    weight_svd_loss: float
    records: list[LayerUpdateRecord] = field(default_factory=list)
    training: TrainResult | None = None
    model: ToyModel | None = None

    def summary(self) -> dict:
        return {
            "target_ratio": self.target,
            "ratio": self.ratio,
            "ranks": {k: int(v) for k, v in self.alloc.ks.items()},
            "dense_loss": self.dense_loss,
            "updated_loss": self.updated_loss,
            "packed_loss": self.packed_loss,
            "weight_svd_loss": self.weight_svd_loss,
            "packed_over_updated": self.packed_loss / self.updated_loss if self.updated_loss > 0 else float("nan"),
            "oracle_fraction": {r.layer: r.oracle_fraction for r in self.records},
        }


def compress(
    model: ToyModel,
    train: Dataset,
    alloc: RankAllocation,
    evaluate_on: Dataset | None = None,
    target: float | None = None,
    training: TrainResult | None = None,
) -> PipelineResult:
    """Everything after rank learning, for an already-integer allocation."""
    evaluate_on = evaluate_on or train
    updated, records = update_all_weights(model, train, alloc)
    packed = pack_model(updated, alloc)
    return PipelineResult(
        target if target is not None else model_ratio(alloc),
        alloc,
        model_ratio(alloc),
        mode_loss(model, evaluate_on),
        mode_loss(updated, evaluate_on),
        mode_loss(packed, evaluate_on, "factored"),
        mode_loss(model, evaluate_on, "weight", alloc=alloc),
        records,
        training,
        packed,
    )


def run_pipeline(
    model: ToyModel,
    train: Dataset,
    target: CompressionTarget,
    hyper: TrainHyper = TrainHyper(),
    evaluate_on: Dataset | None = None,
) -> PipelineResult:
    result = train_ranks(model, train, target, hyper)
    alloc = round_ranks(result.alloc, target, hyper.counting)
    log.info("rounded ranks %s (ratio %.4f)", alloc.int_ks(), model_ratio(alloc, hyper.counting))
    return compress(model, train, alloc, evaluate_on, target.r_target, result)


@dataclass
class RemapRow:
    ratio: float
    remapped_ranks: dict
    traditional_ranks: dict
    remapped_ratio: float
    traditional_ratio: float
    remapped_loss: float
    traditional_loss: float

    @property
    def ok(self) -> bool:
        return self.remapped_loss <= self.traditional_loss


def remap_comparison(model: ToyModel, train: Dataset, ratios=(0.4, 0.6, 0.8), evaluate_on: Dataset | None = None) -> list[RemapRow]:
    """Equal storage budgets: packed ranks under remapped counting vs unquantized ranks under two-factor counting."""
    evaluate_on = evaluate_on or train
    rows = []
    for r in ratios:
        dims = model.dims()
        a_re = round_ranks(RankAllocation.uniform(dims, r, "remapped"), r, "remapped")
        a_tr = round_ranks(RankAllocation.uniform(dims, r, "traditional"), r, "traditional")
        packed = pack_model(update_all_weights(model, train, a_re)[0], a_re)
        plain = update_all_weights(model, train, a_tr)[0]
        rows.append(
            RemapRow(
                r,
                a_re.int_ks(),
                a_tr.int_ks(),
                model_ratio(a_re, "remapped"),
                model_ratio(a_tr, "traditional"),
                mode_loss(packed, evaluate_on, "factored"),
                mode_loss(plain, evaluate_on),
            )
        )
    return rows


def default_setup(kind: str = "char_lm", seed: int = 0, count: int = 64) -> tuple[ToyModel, Dataset, Dataset]:
    """Seeded teacher model with train and held-out splits."""
    return make_toy_model(kind, seed), make_dataset(kind, seed, count, "train"), make_dataset(kind, seed, count, "test")


__all__ = [
    "BackwardConfig",
    "PipelineResult",
    "RemapRow",
    "compress",
    "default_setup",
    "evaluate",
    "pack_model",
    "packed_layers",
    "remap_comparison",
    "run_pipeline",
    "weight_svd_truncate",
]
