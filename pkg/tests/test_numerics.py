import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from pgat.numerics import (
    DegenerateInputError,
    DimensionError,
    GradientPropagationError,
    grad_check,
    linear_forward,
    masked_layer_norm,
    masked_softmax,
)


def naive_matmul(w, x):
    out = [[0.0] * len(x[0]) for _ in range(len(w))]
    for i in range(len(w)):
        for j in range(len(x[0])):
            acc = 0.0
            for k in range(len(x)):
                acc += w[i][k] * x[k][j]
            out[i][j] = acc
    return out


# -- linear -----------------------------------------------------------------

def test_linear_identity():
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    y = linear_forward(torch.eye(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64), x)
    assert torch.equal(y, x)


def test_linear_scale_and_shift():
    w = torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
    b = torch.tensor([1.0, 1.0], dtype=torch.float64)
    y = linear_forward(w, b, torch.tensor([[1.0], [1.0]], dtype=torch.float64))
    assert y.flatten().tolist() == [3.0, 3.0]


def test_linear_matches_naive_loops():
    rng = np.random.default_rng(3)
    w, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(3, 5))
    ref = np.array(naive_matmul(w.tolist(), x.tolist())) + b[:, None]
    got = linear_forward(torch.as_tensor(w), torch.as_tensor(b), torch.as_tensor(x)).numpy()
    assert np.abs(got - ref).max() < 1e-12


def test_linear_rejects_shape_mismatch():
    with pytest.raises(DimensionError):
        linear_forward(torch.zeros(2, 3), None, torch.zeros(4, 1))


# -- masked layer norm ------------------------------------------------------

def test_masked_norm_two_point_standardization():
    x = torch.tensor([[1.0, 3.0], [1.0, 3.0]], dtype=torch.float64)
    y = masked_layer_norm(x, torch.ones(2, dtype=torch.bool))
    assert np.allclose(y.numpy(), [[-1, 1], [-1, 1]], atol=1e-4)


def test_masked_norm_padding_column_is_ignored_bitwise():
    x = torch.tensor([[1.0, 3.0], [2.0, -5.0]], dtype=torch.float64)
    padded = torch.cat([x, torch.tensor([[123.0], [-9e9]], dtype=torch.float64)], dim=1)
    base = masked_layer_norm(x, torch.ones(2, dtype=torch.bool))
    out = masked_layer_norm(padded, torch.tensor([True, True, False]))
    assert torch.equal(out[:, :2], base)
    assert torch.equal(out[:, 2], torch.zeros(2, dtype=torch.float64))


def test_masked_norm_matches_direct_statistics():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6))
    mask = np.array([True, False, True, True, False, True])
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    valid = x[:, mask]
    mu = valid.mean(axis=1, keepdims=True)
    var = ((valid - mu) ** 2).mean(axis=1, keepdims=True)
    ref = gamma[:, None] * (valid - mu) / np.sqrt(var + 1e-5) + beta[:, None]
    got = masked_layer_norm(torch.as_tensor(x), torch.as_tensor(mask), torch.as_tensor(gamma), torch.as_tensor(beta)).numpy()
    assert np.abs(got[:, mask] - ref).max() < 1e-12
    assert np.all(got[:, ~mask] == 0)
    plain = masked_layer_norm(torch.as_tensor(x), torch.as_tensor(mask)).numpy()
    assert np.abs(plain[:, mask].mean(axis=1)).max() < 1e-10


def test_masked_norm_all_false_mask_raises():
    with pytest.raises(DegenerateInputError):
        masked_layer_norm(torch.ones(2, 3), torch.zeros(3, dtype=torch.bool))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(0, 5))
def test_masked_norm_garbage_invariance(seed, valid, pad):
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.normal(size=(3, valid + pad)))
    mask = torch.zeros(valid + pad, dtype=torch.bool)
    mask[:valid] = True
    junk = x.clone()
    junk[:, valid:] = torch.as_tensor(rng.choice([np.nan, np.inf, -1e300, 7.0], size=(3, pad)))
    assert torch.equal(masked_layer_norm(x, mask), masked_layer_norm(junk, mask))


# -- masked softmax ---------------------------------------------------------

def test_softmax_uniform_row():
    w = masked_softmax(torch.zeros(1, 3, dtype=torch.float64), torch.ones(3, dtype=torch.bool))
    assert np.allclose(w.numpy(), 1 / 3, atol=1e-15)


def test_softmax_excludes_masked_sender():
    w = masked_softmax(torch.tensor([[10.0, 0.0, 0.0]], dtype=torch.float64), torch.tensor([True, True, False]))
    assert w[0, 2].item() == 0.0
    assert abs(w.sum().item() - 1) < 1e-15
    assert abs(w[0, 0].item() - 1 / (1 + math.exp(-10))) < 1e-15


def test_softmax_large_scores_stay_finite():
    w = masked_softmax(torch.tensor([[1000.0, 1001.0]], dtype=torch.float64), torch.ones(2, dtype=torch.bool))
    assert torch.isfinite(w).all()
    assert abs(w[0, 1].item() / w[0, 0].item() - math.e) < 1e-12


def test_softmax_all_masked_raises():
    with pytest.raises(DegenerateInputError):
        masked_softmax(torch.zeros(2, 2), torch.zeros(2, dtype=torch.bool))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(1, 8), st.floats(0.1, 300))
def test_softmax_rows_are_distributions(seed, rows, cols, scale):
    rng = np.random.default_rng(seed)
    s = torch.as_tensor(rng.normal(size=(rows, cols)) * scale)
    mask = torch.as_tensor(rng.random(cols) < 0.5)
    mask[rng.integers(cols)] = True
    w = masked_softmax(s, mask)
    assert torch.all((w >= 0) & (w <= 1))
    assert (w.sum(-1) - 1).abs().max().item() < 1e-9
    assert torch.all(w[:, ~mask] == 0)


# -- gradient checker -------------------------------------------------------

def test_grad_check_quadratic_form():
    w = torch.tensor([[0.3, -1.2], [0.7, 2.0]], dtype=torch.float64, requires_grad=True)
    x = torch.tensor([1.5, -0.5], dtype=torch.float64)
    loss = lambda: 0.5 * (w @ x).pow(2).sum()
    analytic = torch.outer((w @ x).detach(), x)
    report = grad_check(loss, [("w", w)], 1e-6)
    assert report.max_rel_error < 1e-8
    g, = torch.autograd.grad(loss(), w)
    assert torch.allclose(g, analytic, atol=1e-14)


def test_grad_check_dead_parameter():
    w = torch.ones(2, 2, dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda: (w * 0.0).sum() + 1.0, [("w", w)], 1e-6)
    assert report.errors["w"] == 0.0


def test_grad_check_non_finite_loss():
    w = torch.ones(2, dtype=torch.float64, requires_grad=True)
    with pytest.raises(GradientPropagationError):
        grad_check(lambda: (w / 0.0).sum(), [("w", w)])


@pytest.mark.parametrize("seed", range(50))
def test_kernel_gradients_match_finite_differences(seed):
    g = torch.Generator().manual_seed(seed)
    rand = lambda *s: torch.randn(*s, dtype=torch.float64, generator=g)
    w = rand(5, 4).requires_grad_()
    b = rand(5).requires_grad_()
    x = rand(2, 4, 6).requires_grad_()
    gamma = rand(5).requires_grad_()
    beta = rand(5).requires_grad_()
    mask = torch.tensor([[True, True, True, False, False, False], [True] * 5 + [False]])
    proj = rand(2, 5, 6)
    sproj = rand(2, 6, 6)

    def loss():
        h = linear_forward(w, b, x)
        n = masked_layer_norm(h, mask, gamma, beta)
        a = masked_softmax(torch.matmul(n.transpose(-1, -2), n), mask[:, None, :].expand(2, 1, 6))
        return (n * proj).sum() + (a * sproj).sum()

    report = grad_check(loss, [("w", w), ("b", b), ("x", x), ("gamma", gamma), ("beta", beta)], 1e-5)
    assert report.max_rel_error < 1e-4, report.errors
