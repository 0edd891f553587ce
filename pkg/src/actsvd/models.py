"""Toy models, seeded datasets, dense forward pass and task losses.

A model is a chain of linear maps ``A = x @ W`` (``W`` is ``m × n``), each
followed by an elementwise activation. Samples are token-by-feature
matrices, so every layer sees one activation matrix per sample.

Random streams come from ``numpy.random.PCG64`` seeded with
``SeedSequence([seed, purpose])``; see ``docs/format.md`` for the purpose
codes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

KINDS = ("teacher_student_regression", "char_lm")
ACTIVATIONS = ("identity", "relu", "tanh")

# SeedSequence purpose codes; changing them changes every generated artifact.
_PURPOSE = {"weights": 0, "train": 1, "test": 2, "mixing": 3}

CHAR_VOCAB = 16
CHAR_CONTEXT = 2
CHAR_TOKENS = 64
REGRESSION_TOKENS = 48


def rng_for(seed: int, purpose: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), _PURPOSE[purpose]])))


@dataclass
class LayerSpec:
    name: str
    weight: np.ndarray
    activation: str = "identity"
    compressible: bool = True
    packed: object | None = None  # PackedWeight, kept untyped to avoid an import cycle

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError(f"layer {self.name}: weight must be 2-D")

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass
class ToyModel:
    layers: list[LayerSpec]
    kind: str = "teacher_student_regression"

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.shape[1] != nxt.shape[0]:
                raise ValueError(f"dimension chain broken between {prev.name} {prev.shape} and {nxt.name} {nxt.shape}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].shape[1]

    @property
    def compressible(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.compressible]

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def dims(self) -> dict[str, tuple[int, int]]:
        return {layer.name: layer.shape for layer in self.compressible}

    def with_weights(self, weights: dict[str, np.ndarray]) -> "ToyModel":
        """Copy of the model with some weights replaced (packed data dropped there)."""
        out = copy.deepcopy(self)
        for layer in out.layers:
            if layer.name in weights:
                layer.weight = np.asarray(weights[layer.name], dtype=np.float64)
                layer.packed = None
        return out


@dataclass
class Dataset:
    kind: str
    seed: int
    inputs: np.ndarray  # (samples, tokens, features)
    targets: np.ndarray  # (samples, tokens, out) floats or (samples, tokens) ints
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.kind, self.seed, self.inputs[idx], self.targets[idx], self.split, dict(self.meta))


def apply_activation(z: np.ndarray, name: str) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def activation_grad(z: np.ndarray, out: np.ndarray, name: str) -> np.ndarray:
    """Derivative of the activation given its pre-activation ``z`` and output."""
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return 1.0 - out * out


def forward(model: ToyModel, x: np.ndarray, return_activations: bool = False):
    """Dense forward pass; optionally also returns each layer's ``x @ W``."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != model.input_dim:
        raise ValueError(f"input has {h.shape[-1]} features, model expects {model.input_dim}")
    acts = {}
    for layer in model.layers:
        a = h @ layer.weight
        acts[layer.name] = a
        h = apply_activation(a, layer.activation)
    return (h, acts) if return_activations else h


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def task_loss(output: np.ndarray, targets: np.ndarray, kind: str) -> float:
    """MSE for regression, mean next-token cross-entropy (nats) for ``char_lm``."""
    if kind == "char_lm":
        logp = _log_softmax(output)
        picked = np.take_along_axis(logp, np.asarray(targets)[..., None], axis=-1)
        return float(-picked.mean())
    if np.shape(output) != np.shape(targets):
        raise ValueError(f"output {np.shape(output)} and targets {np.shape(targets)} differ")
    diff = output - targets
    return float(np.mean(diff * diff))


def task_loss_grad(output: np.ndarray, targets: np.ndarray, kind: str) -> np.ndarray:
    if kind == "char_lm":
        p = np.exp(_log_softmax(output))
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.asarray(targets)[..., None], 1.0, axis=-1)
        return (p - onehot) / np.prod(np.shape(targets))
    return 2.0 * (output - targets) / output.size


def perplexity(output: np.ndarray, targets: np.ndarray) -> float:
    return float(np.exp(task_loss(output, targets, "char_lm")))


def evaluate(model: ToyModel, data: Dataset) -> dict:
    out = forward(model, data.inputs)
    loss = task_loss(out, data.targets, data.kind)
    result = {"task_loss": loss}
    if data.kind == "char_lm":
        result["perplexity"] = float(np.exp(loss))
    return result


def _spectral_weight(rng: np.random.Generator, m: int, n: int, decay: float, scale: float) -> np.ndarray:
    q = min(m, n)
    u, _ = np.linalg.qr(rng.standard_normal((m, q)))
    v, _ = np.linalg.qr(rng.standard_normal((n, q)))
    s = scale * np.exp(-np.arange(q) / decay)
    # f32-representable so that saving as float32 is lossless
    return ((u * s) @ v.T).astype(np.float32).astype(np.float64)


_REGRESSION_LAYERS = [
    # name, m, n, activation, spectrum decay, top singular value
    ("fc1", 16, 32, "tanh", 6.0, 1.6),
    ("fc2", 32, 32, "tanh", 10.0, 2.0),
    ("fc3", 32, 8, "identity", 3.0, 5.0),
]
_CHAR_LAYERS = [
    ("block1.in", 32, 32, "tanh", 8.0, 4.0),
    ("block1.out", 32, 32, "tanh", 5.0, 3.0),
    ("block2.in", 32, 32, "tanh", 12.0, 3.0),
    ("block2.out", 32, 16, "identity", 4.0, 14.0),
]


def make_toy_model(kind: str, seed: int = 0) -> ToyModel:
    """Seeded teacher network for ``kind``; every weight is compressible."""
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    rng = rng_for(seed, "weights")
    table = _CHAR_LAYERS if kind == "char_lm" else _REGRESSION_LAYERS
    layers = [
        LayerSpec(name, _spectral_weight(rng, m, n, decay, top), act, True)
        for name, m, n, act, decay, top in table
    ]
    return ToyModel(layers, kind)


def char_features(prev: np.ndarray) -> np.ndarray:
    """One-hot encode a ``(..., CHAR_CONTEXT)`` window of symbols into ``(..., 32)``."""
    prev = np.asarray(prev)
    eye = np.eye(CHAR_VOCAB)
    return eye[prev].reshape(prev.shape[:-1] + (CHAR_CONTEXT * CHAR_VOCAB,))


def make_dataset(kind: str, seed: int = 0, count: int = 64, split: str = "train") -> Dataset:
    """Deterministic samples drawn from the seeded teacher of the same ``kind``.

    Regression: inputs live near a low-dimensional subspace, targets are the
    teacher outputs plus 5% noise. ``char_lm``: symbol sequences sampled from
    the teacher's next-symbol distribution; targets are the next symbols.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    if count < 1:
        raise ValueError("count must be positive")
    teacher = make_toy_model(kind, seed)
    rng = rng_for(seed, split)

    if kind == "teacher_student_regression":
        mix_rng = rng_for(seed, "mixing")
        d = teacher.input_dim
        mixing = np.linalg.qr(mix_rng.standard_normal((d, d)))[0] * np.exp(-np.arange(d) / 4.0)[:, None]
        z = rng.standard_normal((count, REGRESSION_TOKENS, d))
        x = (z @ mixing).astype(np.float32).astype(np.float64)
        clean = forward(teacher, x)
        y = clean + 0.05 * clean.std() * rng.standard_normal(clean.shape)
        return Dataset(kind, seed, x, y, split)

    total = CHAR_TOKENS + CHAR_CONTEXT
    seq = np.zeros((count, total), dtype=np.int64)
    seq[:, :CHAR_CONTEXT] = rng.integers(0, CHAR_VOCAB, size=(count, CHAR_CONTEXT))
    for t in range(CHAR_CONTEXT, total):
        logits = forward(teacher, char_features(seq[:, t - CHAR_CONTEXT:t]))
        p = np.exp(_log_softmax(logits))
        u = rng.random(count)[:, None]
        seq[:, t] = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), CHAR_VOCAB - 1)
    windows = np.stack([seq[:, t - CHAR_CONTEXT:t] for t in range(CHAR_CONTEXT, total)], axis=1)
    return Dataset(kind, seed, char_features(windows), seq[:, CHAR_CONTEXT:], split, {"sequences": seq})
