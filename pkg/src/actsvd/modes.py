"""Forward passes under the different truncation modes, and their comparison.

``hard`` truncates every sample's activation ``A = x W`` to its best rank-k
approximation; ``weight`` truncates ``W`` itself once (the naive baseline);
``factored`` runs ``(x w1) w2`` from packed or explicit factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import svd_full, truncate
from .models import Dataset, ToyModel, apply_activation, task_loss
from .packing import unpack
from .ranks import RankAllocation, SmoothTruncation, truncate_activation

MODES = ("dense", "smooth", "hard", "factored", "weight")


class ModeError(ValueError):
    """A forward mode was requested without the artifacts it needs."""


def weight_svd_truncate(model: ToyModel, alloc: RankAllocation) -> ToyModel:
    """Naive baseline: replace each ``W`` by its own rank-k truncation."""
    ks = alloc.int_ks()
    return model.with_weights({name: truncate(model.layer(name).weight, k) for name, k in ks.items()})


def _layer_factors(model: ToyModel, factors: dict | None) -> dict:
    out = {}
    for layer in model.layers:
        if factors and layer.name in factors:
            out[layer.name] = factors[layer.name]
        elif layer.packed is not None:
            out[layer.name] = unpack(layer.packed)
    return out


def forward_modes(
    model: ToyModel,
    x: np.ndarray,
    mode: str = "dense",
    alloc: RankAllocation | None = None,
    beta: float = 10.0,
    factors: dict | None = None,
    return_activations: bool = False,
):
    """Forward pass in one of :data:`MODES`.

    ``factors`` maps layer names to ``(w1, w2)``; in ``factored`` mode any
    layer carrying a ``packed`` weight is unpacked when no explicit factors
    are given. Layers without factors run densely.
    """
    if mode not in MODES:
        raise ModeError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode in ("smooth", "hard", "weight") and alloc is None:
        raise ModeError(f"mode {mode!r} needs a rank allocation")
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != model.input_dim:
        raise ModeError(f"input has {h.shape[-1]} features, model expects {model.input_dim}")

    if mode == "weight":
        model = weight_svd_truncate(model, alloc)
    ks = {} if alloc is None or mode in ("dense", "weight", "factored") else alloc.ks
    if mode == "hard":
        ks = alloc.int_ks()
    fac = _layer_factors(model, factors) if mode == "factored" else {}
    if mode == "factored" and not fac:
        raise ModeError("factored mode needs explicit factors or packed layers")

    acts = {}
    for layer in model.layers:
        if layer.name in fac:
            w1, w2 = fac[layer.name]
            a = (h @ w1) @ w2
        else:
            a = h @ layer.weight
            if layer.name in ks:
                if mode == "hard":
                    a = svd_full(a).reconstruct(ks[layer.name])
                else:
                    a = truncate_activation(a, SmoothTruncation(ks[layer.name], beta), min(layer.shape))
        acts[layer.name] = a
        h = apply_activation(a, layer.activation)
    return (h, acts) if return_activations else h


def mode_loss(model: ToyModel, data: Dataset, mode: str = "dense", **kw) -> float:
    return task_loss(forward_modes(model, data.inputs, mode, **kw), data.targets, data.kind)


@dataclass
class SweepProbe:
    layer: str
    k: int
    activation_loss: float
    weight_loss: float

    @property
    def ok(self) -> bool:
        return self.activation_loss <= self.weight_loss


@dataclass
class TruncationReport:
    dense_loss: float
    activation_loss: float
    weight_loss: float
    ranks: dict = field(default_factory=dict)
    sweep: list[SweepProbe] = field(default_factory=list)

    @property
    def ordering(self) -> str:
        if np.isclose(self.activation_loss, self.weight_loss, rtol=1e-12, atol=1e-15):
            return "tie"
        return "activation<weight" if self.activation_loss < self.weight_loss else "weight<activation"

    def to_dict(self) -> dict:
        return {
            "dense_loss": self.dense_loss,
            "activation_loss": self.activation_loss,
            "weight_loss": self.weight_loss,
            "ordering": self.ordering,
            "ranks": dict(self.ranks),
            "sweep": [vars(p) | {"ok": p.ok} for p in self.sweep],
        }


def single_layer_sweep(model: ToyModel, data: Dataset, fractions=(0.25, 0.5, 0.75)) -> list[SweepProbe]:
    """Truncate one layer at a time to ``round(f·min(m, n))`` under both modes."""
    dims = model.dims()
    probes = []
    for name, (m, n) in dims.items():
        for frac in fractions:
            k = max(1, int(round(frac * min(m, n))))
            alloc = RankAllocation({name: float(k)}, {name: (m, n)})
            probes.append(SweepProbe(name, k, mode_loss(model, data, "hard", alloc=alloc), mode_loss(model, data, "weight", alloc=alloc)))
    return probes


def compare_truncation_modes(
    model: ToyModel, data: Dataset, alloc: RankAllocation, sweep_fractions=(0.25, 0.5, 0.75)
) -> TruncationReport:
    """Activation vs weight truncation at the same integer ranks, plus a one-layer sweep."""
    ks = alloc.int_ks()
    return TruncationReport(
        mode_loss(model, data),
        mode_loss(model, data, "hard", alloc=alloc),
        mode_loss(model, data, "weight", alloc=alloc),
        ks,
        single_layer_sweep(model, data, sweep_fractions) if sweep_fractions else [],
    )
