"""Learning per-layer truncation positions through a smooth spectral mask.

Each compressible layer's activation ``A = x @ W`` is replaced during
training by ``U diag(T(σ)) Vᵀ`` with ``T(σᵢ) = σᵢ·(½·tanh(β(k - i)) + ½)``
(1-based ``i``), so the truncation position ``k`` receives gradients. Only
the ``k`` values are trained; weights stay frozen.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import BackwardConfig, NumericalError, UpstreamGrads, svd_backward
from .linalg import SvdFactors, as_matrix, svd_full
from .models import Dataset, ToyModel, activation_grad, apply_activation, task_loss, task_loss_grad

log = logging.getLogger(__name__)

COUNTINGS = ("remapped", "traditional")


@dataclass(frozen=True)
class SmoothTruncation:
    k: float
    beta: float = 10.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class CompressionTarget:
    r_target: float
    ratio_penalty_weight: float = 10.0

    def __post_init__(self):
        if not 0 < self.r_target <= 1:
            raise ValueError(f"target ratio must lie in (0, 1], got {self.r_target}")
        if not self.ratio_penalty_weight > 0:
            raise ValueError("ratio_penalty_weight must be positive")


@dataclass
class RankAllocation:
    """Ordered per-layer truncation positions together with layer shapes."""

    ks: dict[str, float]
    dims: dict[str, tuple[int, int]]

    def __post_init__(self):
        if set(self.ks) != set(self.dims):
            raise ValueError("every layer needs both a k and its dimensions")

    @classmethod
    def uniform(cls, dims: dict[str, tuple[int, int]], ratio: float, counting: str = "remapped") -> "RankAllocation":
        """Same compression ratio on every layer (continuous ``k``)."""
        ks = {}
        for name, (m, n) in dims.items():
            if counting == "remapped":
                ks[name] = ratio * min(m, n)
            else:
                ks[name] = min(ratio * m * n / (m + n), min(m, n))
        return cls(ks, dict(dims))

    @classmethod
    def full(cls, dims: dict[str, tuple[int, int]]) -> "RankAllocation":
        return cls({name: float(min(m, n)) for name, (m, n) in dims.items()}, dict(dims))

    def max_rank(self, name: str) -> int:
        return min(self.dims[name])

    def is_integer(self) -> bool:
        return all(float(k).is_integer() for k in self.ks.values())

    def int_ks(self) -> dict[str, int]:
        if not self.is_integer():
            raise ValueError("allocation holds non-integer ranks; call round_ranks first")
        return {name: int(k) for name, k in self.ks.items()}

    def to_json(self) -> dict:
        return {name: {"k": float(k), "m": int(self.dims[name][0]), "n": int(self.dims[name][1])} for name, k in self.ks.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "RankAllocation":
        return cls(
            {name: float(v["k"]) for name, v in obj.items()},
            {name: (int(v["m"]), int(v["n"])) for name, v in obj.items()},
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RankAllocation":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LossBreakdown:
    task_loss: float
    ratio_now: float
    penalty: float
    total: float
    ratio_sign: float = 0.0  # subgradient of |R_now - R_tar| (0 at the kink)


def mask_weights(q: int, k, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Mask values ``½(1 + tanh(β(k - i)))`` for ``i = 1..q`` and their k-derivative."""
    i = np.arange(1, q + 1, dtype=np.float64)
    th = np.tanh(beta * (np.asarray(k, dtype=np.float64)[..., None] - i))
    return 0.5 * th + 0.5, 0.5 * beta * (1.0 - th * th)


def smooth_mask(s, t: SmoothTruncation) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    mask, _ = mask_weights(s.shape[-1], t.k, t.beta)
    return s * mask


def truncate_activation(a, t: SmoothTruncation, k_max: float | None = None) -> np.ndarray:
    """``U diag(T(σ)) Vᵀ`` for a matrix or a stack of matrices.

    ``k`` is clamped to ``[0, k_max]`` (default ``min(m, n)`` of ``a``).
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        as_matrix(arr, "a")
    f = svd_full(arr)
    if k_max is None:
        k_max = f.q
    k = min(max(float(t.k), 0.0), float(k_max))
    mask, _ = mask_weights(f.q, k, t.beta)
    return (f.u * (f.s * mask)[..., None, :]) @ f.vt


def _check_k(m: int, n: int, k) -> None:
    if m < 1 or n < 1:
        raise ValueError("dimensions must be positive")
    if not 0 <= k <= min(m, n):
        raise ValueError(f"k={k} outside [0, {min(m, n)}] for a {m}x{n} matrix")


def ratio_traditional(m: int, n: int, k) -> float:
    """Two-factor storage ``k(m + n)`` relative to ``m·n``."""
    _check_k(m, n, k)
    return k * (m + n) / (m * n)


def ratio_remapped(m: int, n: int, k) -> float:
    """Mixed-precision storage ``k·max(m, n)`` relative to ``m·n`` (= k / min(m, n))."""
    _check_k(m, n, k)
    return k * max(m, n) / (m * n)


def rank_for_remapped_ratio(m: int, n: int, r: float) -> int:
    """Inverse of :func:`ratio_remapped` on integer ranks."""
    if not 0 <= r <= 1:
        raise ValueError(f"ratio must lie in [0, 1], got {r}")
    return int(round(r * m * n / max(m, n)))


def _ratio_terms(m: int, n: int, counting: str) -> int:
    if counting == "remapped":
        return max(m, n)
    if counting == "traditional":
        return m + n
    raise ValueError(f"unknown counting {counting!r}")


def model_ratio(alloc: RankAllocation, counting: str = "remapped") -> float:
    """Storage-weighted ratio over all compressible layers."""
    num = sum(alloc.ks[name] * _ratio_terms(m, n, counting) for name, (m, n) in alloc.dims.items())
    den = sum(m * n for m, n in alloc.dims.values())
    return float(num / den)


def model_ratio_grad(alloc: RankAllocation, counting: str = "remapped") -> dict[str, float]:
    den = sum(m * n for m, n in alloc.dims.values())
    return {name: _ratio_terms(m, n, counting) / den for name, (m, n) in alloc.dims.items()}


def multi_objective_loss(
    task: float, alloc: RankAllocation, target: CompressionTarget, counting: str = "remapped"
) -> LossBreakdown:
    if not math.isfinite(task):
        raise NumericalError(f"task loss is not finite: {task}")
    r_now = model_ratio(alloc, counting)
    delta = r_now - target.r_target
    penalty = target.ratio_penalty_weight * abs(delta)
    return LossBreakdown(task, r_now, penalty, task + penalty, float(np.sign(delta)))


# --------------------------------------------------------------------------
# differentiable forward/backward through the smoothly truncated model


def smooth_loss_and_grad(
    model: ToyModel,
    x: np.ndarray,
    targets: np.ndarray,
    ks: dict[str, float],
    beta: float = 10.0,
    cfg: BackwardConfig = BackwardConfig(),
    need_grad: bool = True,
) -> tuple[float, dict[str, float]]:
    """Task loss of the smoothly truncated model and ``∂loss/∂k`` per layer."""
    h = np.asarray(x, dtype=np.float64)
    cache = []
    for layer in model.layers:
        a = h @ layer.weight
        entry = {"h_in": h, "layer": layer}
        if layer.compressible and layer.name in ks:
            f = svd_full(a)
            mask, dmask = mask_weights(f.q, ks[layer.name], beta)
            t = f.s * mask
            z = (f.u * t[..., None, :]) @ f.vt
            entry.update(f=f, mask=mask, dmask=dmask, t=t)
        else:
            z = a
        h = apply_activation(z, layer.activation)
        entry.update(z=z, out=h)
        cache.append(entry)

    loss = task_loss(h, targets, model.kind)
    if not need_grad:
        return loss, {}
    if not math.isfinite(loss):
        raise NumericalError(f"task loss is not finite: {loss}")

    grads = {}
    first_trunc = next(i for i, e in enumerate(cache) if "f" in e)
    g_h = task_loss_grad(h, targets, model.kind)
    for idx in range(len(cache) - 1, first_trunc - 1, -1):
        e = cache[idx]
        layer = e["layer"]
        g_z = g_h * activation_grad(e["z"], e["out"], layer.activation)
        if "f" in e:
            f: SvdFactors = e["f"]
            v = f.v
            g_t = np.einsum("...ik,...ij,...jk->...k", f.u, g_z, v)
            grads[layer.name] = float(np.sum(g_t * f.s * e["dmask"]))
            if idx == first_trunc:
                break
            t = e["t"]
            up = UpstreamGrads(
                g_u=(g_z @ v) * t[..., None, :],
                g_s=g_t * e["mask"],
                g_vt=t[..., :, None] * (np.swapaxes(f.u, -1, -2) @ g_z),
            )
            g_a = svd_backward(f, up, cfg)
        else:
            g_a = g_z
        g_h = g_a @ layer.weight.T
    for name in ks:
        grads.setdefault(name, 0.0)
    return loss, grads


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainHyper:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.1
    beta: float = 10.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    counting: str = "remapped"
    init: str = "full"  # "full" (every k at min(m, n)) or "target" (uniform at the target)
    backward: BackwardConfig = field(default_factory=BackwardConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0 or not self.beta > 0:
            raise ValueError("lr and beta must be positive")
        if self.counting not in COUNTINGS:
            raise ValueError(f"counting must be one of {COUNTINGS}")
        if self.init not in ("target", "full"):
            raise ValueError("init must be 'target' or 'full'")


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, last_good: RankAllocation, epoch: int):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


@dataclass
class TrainResult:
    alloc: RankAllocation
    trajectory: list[dict]
    epoch_loss: list[float]  # mean total loss per epoch
    epoch_task_loss: list[float]
    epoch_ratio: list[float]

    @property
    def final_ratio(self) -> float:
        return self.epoch_ratio[-1]

    def write_trajectory(self, path) -> None:
        write_trajectory_csv(path, self.trajectory)


def smoothed_loss(values, alpha: float = 0.95) -> np.ndarray:
    """Exponential moving average ``e_t = α e_{t-1} + (1 - α) x_t`` seeded with ``x_0``."""
    values = np.asarray(values, dtype=np.float64)
    if not 0 <= alpha < 1:
        raise ValueError("alpha must lie in [0, 1)")
    out = np.empty_like(values)
    acc = values[0] if values.size else 0.0
    for i, x in enumerate(values):
        acc = alpha * acc + (1 - alpha) * x
        out[i] = acc
    return out


def is_nonincreasing(values, tol: float = 0.0) -> bool:
    values = np.asarray(values, dtype=np.float64)
    return bool(np.all(np.diff(values) <= tol))


TRAJECTORY_FIELDS = ("epoch", "layer", "k", "task_loss", "ratio")


def write_trajectory_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({key: (repr(row[key]) if isinstance(row[key], float) else row[key]) for key in TRAJECTORY_FIELDS})


class _Adam:
    def __init__(self, size: int, betas: tuple[float, float], eps: float):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0

    def step(self, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


def initial_allocation(model: ToyModel, target: CompressionTarget, hyper: TrainHyper) -> RankAllocation:
    if hyper.init == "full":
        return RankAllocation.full(model.dims())
    return RankAllocation.uniform(model.dims(), target.r_target, hyper.counting)


def train_ranks(
    model: ToyModel,
    data: Dataset,
    target: CompressionTarget,
    hyper: TrainHyper = TrainHyper(),
    init: RankAllocation | None = None,
    task_fn=None,
) -> TrainResult:
    """Learn continuous truncation positions with Adam + cosine decay.

    ``task_fn(x, targets, ks) -> (loss, grads)`` replaces the model's task
    loss when given (used to study the ratio penalty in isolation).
    """
    alloc = init if init is not None else initial_allocation(model, target, hyper)
    names = list(alloc.ks)
    k = np.array([alloc.ks[n] for n in names], dtype=np.float64)
    k_max = np.array([alloc.max_rank(n) for n in names], dtype=np.float64)
    ratio_grad = model_ratio_grad(alloc, hyper.counting)
    ratio_grad = np.array([ratio_grad[n] for n in names])

    if task_fn is None:
        def task_fn(x, y, ks):
            return smooth_loss_and_grad(model, x, y, ks, hyper.beta, hyper.backward)

    rng = np.random.Generator(np.random.PCG64(hyper.seed))
    n_samples = len(data)
    steps_per_epoch = math.ceil(n_samples / hyper.batch_size)
    total_steps = hyper.epochs * steps_per_epoch
    opt = _Adam(len(names), hyper.adam_betas, hyper.adam_eps)
    step = 0
    rows: list[dict] = []
    epoch_loss, epoch_task, epoch_ratio = [], [], []
    last_good = RankAllocation(dict(zip(names, k.tolist())), dict(alloc.dims))

    for epoch in range(hyper.epochs):
        order = rng.permutation(n_samples)
        totals, tasks = [], []
        for start in range(0, n_samples, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            ks = dict(zip(names, k.tolist()))
            try:
                loss, grads = task_fn(data.inputs[idx], data.targets[idx], ks)
                current = RankAllocation(ks, alloc.dims)
                br = multi_objective_loss(loss, current, target, hyper.counting)
            except NumericalError as exc:
                raise TrainingDiverged(str(exc), last_good, epoch) from exc
            g = np.array([grads[n] for n in names])
            g = g + target.ratio_penalty_weight * br.ratio_sign * ratio_grad
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged("non-finite gradient w.r.t. k", last_good, epoch)
            k = np.clip(k - opt.step(g, cosine_lr(hyper.lr, step, total_steps)), 0.0, k_max)
            step += 1
            totals.append(br.total)
            tasks.append(br.task_loss)

        ks = dict(zip(names, k.tolist()))
        last_good = RankAllocation(ks, dict(alloc.dims))
        ratio = model_ratio(last_good, hyper.counting)
        epoch_loss.append(float(np.mean(totals)))
        epoch_task.append(float(np.mean(tasks)))
        epoch_ratio.append(ratio)
        for name in names:
            rows.append({"epoch": epoch, "layer": name, "k": ks[name], "task_loss": epoch_task[-1], "ratio": ratio})
        if epoch % 25 == 0 or epoch == hyper.epochs - 1:
            log.info("epoch %d: loss=%.6f task=%.6f ratio=%.4f", epoch, epoch_loss[-1], epoch_task[-1], ratio)

    return TrainResult(last_good, rows, epoch_loss, epoch_task, epoch_ratio)


def round_ranks(
    alloc: RankAllocation, target: CompressionTarget | float, counting: str = "remapped"
) -> RankAllocation:
    """Nearest-integer ranks in ``[1, min(m, n)]``, then greedy ±1 repair toward the target ratio.

    Each repair step moves the layer whose continuous ``k`` lies closest to
    its adjusted integer; it stops once no single step brings the model
    ratio closer to the target.
    """
    r_target = target.r_target if isinstance(target, CompressionTarget) else float(target)
    names = list(alloc.ks)
    cont = {n: float(alloc.ks[n]) for n in names}
    ints = {n: int(min(max(round(cont[n]), 1), alloc.max_rank(n))) for n in names}
    step_size = model_ratio_grad(alloc, counting)

    def ratio(ks):
        return model_ratio(RankAllocation({n: float(v) for n, v in ks.items()}, alloc.dims), counting)

    while True:
        gap = r_target - ratio(ints)
        direction = 1 if gap > 0 else -1
        candidates = []
        for order, n in enumerate(names):
            new = ints[n] + direction
            if 1 <= new <= alloc.max_rank(n) and abs(gap - direction * step_size[n]) < abs(gap) - 1e-15:
                candidates.append((abs(cont[n] - new), order, n))
        if not candidates:
            break
        _, _, chosen = min(candidates)
        ints[chosen] += direction
    return RankAllocation({n: float(v) for n, v in ints.items()}, dict(alloc.dims))
