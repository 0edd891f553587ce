from __future__ import annotations

import math

import numpy as np
import pytest

from actsvd.linalg import truncate
from actsvd.models import (
    CHAR_VOCAB,
    LayerSpec,
    ToyModel,
    apply_activation,
    evaluate,
    forward,
    make_dataset,
    make_toy_model,
    perplexity,
    task_loss,
)
from actsvd.modes import (
    ModeError,
    compare_truncation_modes,
    forward_modes,
    mode_loss,
    single_layer_sweep,
    weight_svd_truncate,
)
from actsvd.packing import svd_factors
from actsvd.pipeline import pack_model
from actsvd.ranks import RankAllocation, round_ranks

KINDS = ("teacher_student_regression", "char_lm")
RATIOS = (0.4, 0.6, 0.8)


def matched_alloc(model, ratio):
    return round_ranks(RankAllocation.uniform(model.dims(), ratio), ratio)


def naive_forward(model, x):
    """Scalar loops for the matmuls, math.tanh for the nonlinearity."""
    h = [list(map(float, row)) for row in x]
    for layer in model.layers:
        w = layer.weight
        m, n = w.shape
        out = []
        for row in h:
            acc = [0.0] * n
            for j in range(n):
                s = 0.0
                for i in range(m):
                    s += row[i] * w[i, j]
                acc[j] = s
            if layer.activation == "tanh":
                acc = [math.tanh(v) for v in acc]
            elif layer.activation == "relu":
                acc = [max(v, 0.0) for v in acc]
            out.append(acc)
        h = out
    return np.array(h)


def naive_cross_entropy(logits, targets):
    total, count = 0.0, 0
    for row, t in zip(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1)):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[int(t)]
        count += 1
    return total / count


# -- models and data -----------------------------------------------------------------------


def test_identity_model_passes_input():
    model = ToyModel([LayerSpec("a", np.eye(4)), LayerSpec("b", np.eye(4))])
    x = np.random.default_rng(0).standard_normal((3, 5, 4))
    assert np.array_equal(forward(model, x), x)


def test_single_layer_is_matmul():
    w = np.random.default_rng(1).standard_normal((4, 3))
    x = np.random.default_rng(2).standard_normal((5, 4))
    assert np.array_equal(forward(ToyModel([LayerSpec("a", w)]), x), x @ w)


@pytest.mark.parametrize("kind", KINDS)
def test_forward_matches_naive_evaluator(kind):
    model, data = make_toy_model(kind, 0), make_dataset(kind, 0, 1)
    x = data.inputs[0][:6]
    np.testing.assert_allclose(forward(model, x), naive_forward(model, x), rtol=1e-12, atol=1e-13)


def test_forward_returns_activations():
    model, data = make_toy_model("teacher_student_regression", 0), make_dataset("teacher_student_regression", 0, 2)
    out, acts = forward(model, data.inputs, return_activations=True)
    assert list(acts) == [layer.name for layer in model.layers]
    last = model.layers[-1]
    np.testing.assert_array_equal(out, apply_activation(acts[last.name], last.activation))


def test_model_validation():
    with pytest.raises(ValueError):
        ToyModel([LayerSpec("a", np.eye(3)), LayerSpec("a", np.eye(3))])
    with pytest.raises(ValueError):
        ToyModel([LayerSpec("a", np.ones((3, 4))), LayerSpec("b", np.ones((5, 2)))])
    with pytest.raises(ValueError):
        LayerSpec("a", np.eye(2), "sigmoid")
    with pytest.raises(ValueError):
        forward(ToyModel([LayerSpec("a", np.eye(3))]), np.ones((2, 4)))


def test_default_shapes():
    assert make_toy_model("teacher_student_regression").dims() == {"fc1": (16, 32), "fc2": (32, 32), "fc3": (32, 8)}
    char = make_toy_model("char_lm")
    assert len(char.dims()) == 4 and char.output_dim == CHAR_VOCAB
    for kind in KINDS:
        data = make_dataset(kind, 0, 2)
        assert data.inputs.shape[1] >= data.inputs.shape[2]  # tokens ≥ features


@pytest.mark.parametrize("kind", KINDS)
def test_dataset_deterministic(kind):
    a, b = make_dataset(kind, 3, 8), make_dataset(kind, 3, 8)
    assert a.inputs.tobytes() == b.inputs.tobytes() and a.targets.tobytes() == b.targets.tobytes()
    c = make_dataset(kind, 3, 8, "test")
    assert a.inputs.tobytes() != c.inputs.tobytes()
    assert make_toy_model(kind, 3).layers[0].weight.tobytes() == make_toy_model(kind, 3).layers[0].weight.tobytes()


def test_dataset_validation():
    for args in (("bogus", 0, 4), ("char_lm", 0, 0), ("char_lm", 0, 4, "dev")):
        with pytest.raises(ValueError):
            make_dataset(*args)


# -- losses -------------------------------------------------------------------------------


def test_regression_loss_zero_on_exact_output():
    y = np.random.default_rng(3).standard_normal((2, 4, 8))
    assert task_loss(y, y, "teacher_student_regression") == 0.0


def test_uniform_predictions_perplexity_16():
    targets = np.random.default_rng(4).integers(0, CHAR_VOCAB, (3, 10))
    assert perplexity(np.zeros((3, 10, CHAR_VOCAB)), targets) == pytest.approx(16.0, rel=1e-12)


def test_cross_entropy_matches_scalar_loop():
    model, data = make_toy_model("char_lm", 0), make_dataset("char_lm", 0, 3)
    logits = forward(model, data.inputs)
    assert task_loss(logits, data.targets, "char_lm") == pytest.approx(naive_cross_entropy(logits, data.targets), rel=1e-12)
    rep = evaluate(model, data)
    assert rep["perplexity"] == pytest.approx(math.exp(rep["task_loss"]))


def test_losses_nonnegative():
    for kind in KINDS:
        model, data = make_toy_model(kind, 1), make_dataset(kind, 1, 4)
        assert evaluate(model, data)["task_loss"] >= 0


# -- forward modes --------------------------------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_factored_full_rank_matches_dense(kind):
    model, data = make_toy_model(kind, 0), make_dataset(kind, 0, 8)
    factors = {}
    for name, (m, n) in model.dims().items():
        w1, v = svd_factors(model.layer(name).weight, min(m, n))
        factors[name] = (w1, v.T)
    dense = forward(model, data.inputs)
    got = forward_modes(model, data.inputs, "factored", factors=factors)
    assert np.linalg.norm(got - dense) / np.linalg.norm(dense) < 1e-6


@pytest.mark.parametrize("kind", KINDS)
def test_hard_full_rank_matches_dense(kind):
    model, data = make_toy_model(kind, 0), make_dataset(kind, 0, 8)
    dense = forward(model, data.inputs)
    hard = forward_modes(model, data.inputs, "hard", alloc=RankAllocation.full(model.dims()))
    np.testing.assert_allclose(hard, dense, rtol=1e-10, atol=1e-12)


def test_hard_zero_rank_kills_activations():
    model, data = make_toy_model("teacher_student_regression", 0), make_dataset("teacher_student_regression", 0, 4)
    first = model.layers[0].name
    alloc = RankAllocation({first: 0.0}, {first: model.layer(first).shape})
    _, acts = forward_modes(model, data.inputs, "hard", alloc=alloc, return_activations=True)
    assert not acts[first].any()


def test_hard_mode_is_per_sample_eckart_young():
    model, data = make_toy_model("char_lm", 0), make_dataset("char_lm", 0, 3)
    first = model.layers[0]
    alloc = RankAllocation({first.name: 5.0}, {first.name: first.shape})
    _, acts = forward_modes(model, data.inputs, "hard", alloc=alloc, return_activations=True)
    for i in range(3):
        np.testing.assert_allclose(acts[first.name][i], truncate(data.inputs[i] @ first.weight, 5), atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_smooth_half_step_matches_hard(kind):
    model, data = make_toy_model(kind, 0), make_dataset(kind, 0, 4)
    alloc = matched_alloc(model, 0.5)
    shifted = RankAllocation({n: k + 0.5 for n, k in alloc.ks.items()}, alloc.dims)
    hard = forward_modes(model, data.inputs, "hard", alloc=alloc)
    smooth = forward_modes(model, data.inputs, "smooth", alloc=shifted, beta=50.0)
    assert np.linalg.norm(smooth - hard) / np.linalg.norm(hard) < 1e-6


def test_smooth_integer_k_sits_between_neighbouring_hard_ranks():
    model, data = make_toy_model("teacher_student_regression", 0), make_dataset("teacher_student_regression", 0, 2)
    first = model.layers[0]
    dims = {first.name: first.shape}
    _, s = forward_modes(model, data.inputs, "smooth", alloc=RankAllocation({first.name: 3.0}, dims), beta=50.0, return_activations=True)
    _, lo = forward_modes(model, data.inputs, "hard", alloc=RankAllocation({first.name: 2.0}, dims), return_activations=True)
    _, hi = forward_modes(model, data.inputs, "hard", alloc=RankAllocation({first.name: 3.0}, dims), return_activations=True)
    np.testing.assert_allclose(s[first.name], 0.5 * (lo[first.name] + hi[first.name]), atol=1e-10)


def test_factored_uses_packed_layers():
    model, data = make_toy_model("teacher_student_regression", 0), make_dataset("teacher_student_regression", 0, 4)
    alloc = RankAllocation.full(model.dims())
    packed = pack_model(model, alloc)
    out = forward_modes(packed, data.inputs, "factored")
    dense = forward(model, data.inputs)
    assert np.linalg.norm(out - dense) / np.linalg.norm(dense) < 0.05


def test_mode_errors():
    model, data = make_toy_model("teacher_student_regression", 0), make_dataset("teacher_student_regression", 0, 2)
    for mode in ("smooth", "hard", "weight"):
        with pytest.raises(ModeError):
            forward_modes(model, data.inputs, mode)
    with pytest.raises(ModeError):
        forward_modes(model, data.inputs, "factored")
    with pytest.raises(ModeError):
        forward_modes(model, data.inputs, "sideways")


def test_weight_svd_truncate_ranks():
    model = make_toy_model("char_lm", 0)
    alloc = matched_alloc(model, 0.4)
    out = weight_svd_truncate(model, alloc)
    for name, k in alloc.int_ks().items():
        assert np.linalg.matrix_rank(out.layer(name).weight) <= k


# -- truncation-mode comparison ------------------------------------------------------------------------------


@pytest.mark.parametrize("kind", KINDS)
def test_full_rank_comparison_ties(kind):
    model, data = make_toy_model(kind, 0), make_dataset(kind, 0, 8)
    rep = compare_truncation_modes(model, data, RankAllocation.full(model.dims()), sweep_fractions=())
    assert rep.ordering == "tie"
    assert rep.activation_loss == pytest.approx(rep.dense_loss, rel=1e-10)
    assert rep.weight_loss == pytest.approx(rep.dense_loss, rel=1e-10)


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("ratio", RATIOS)
def test_activation_truncation_beats_weight_truncation(kind, ratio):
    model, data = make_toy_model(kind, 0), make_dataset(kind, 0, 64)
    rep = compare_truncation_modes(model, data, matched_alloc(model, ratio), sweep_fractions=())
    assert rep.activation_loss < rep.weight_loss
    assert rep.ordering == "activation<weight"


@pytest.mark.parametrize("kind", KINDS)
def test_single_layer_sweep(kind):
    model, data = make_toy_model(kind, 0), make_dataset(kind, 0, 64)
    probes = single_layer_sweep(model, data)
    assert len(probes) == 3 * len(model.dims())
    assert all(p.ok for p in probes)


def test_report_to_dict():
    model, data = make_toy_model("teacher_student_regression", 0), make_dataset("teacher_student_regression", 0, 4)
    d = compare_truncation_modes(model, data, matched_alloc(model, 0.6), sweep_fractions=(0.5,)).to_dict()
    assert set(d) == {"dense_loss", "activation_loss", "weight_loss", "ordering", "ranks", "sweep"}
    assert len(d["sweep"]) == 3 and "ok" in d["sweep"][0]
    assert mode_loss(model, data) == d["dense_loss"]
